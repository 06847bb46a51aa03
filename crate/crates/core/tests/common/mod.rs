//! Independent scalar reference implementations used as test oracles.
//! They deliberately avoid the library's matrix and loss helpers.

#![allow(dead_code)]

use modvlad::nextvlad::PoolParams;
use modvlad::numerics::Matrix;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// NeXtVLAD pooling written as plain nested loops over frames, groups,
/// clusters and group features.
pub fn pool_oracle(frames: &Matrix, p: &PoolParams) -> Vec<f64> {
    let cfg = p.cfg;
    let (m, n) = (frames.rows(), cfg.input_dim);
    let wide = cfg.expansion * n;
    let (g_count, k_count) = (cfg.groups, cfg.clusters);
    let s = wide / g_count;

    let mut xdot = vec![vec![0.0; wide]; m];
    for i in 0..m {
        for c in 0..wide {
            let mut acc = p.expansion_b.get(0, c);
            for f in 0..n {
                acc += frames.get(i, f) * p.expansion_w.get(f, c);
            }
            xdot[i][c] = acc;
        }
    }

    let mut y = vec![vec![0.0; s]; k_count];
    for i in 0..m {
        for g in 0..g_count {
            let mut att = p.attention_b.get(0, g);
            for c in 0..wide {
                att += xdot[i][c] * p.attention_w.get(c, g);
            }
            let att = sigmoid(att);
            let mut scores = vec![0.0; k_count];
            for (k, sc) in scores.iter_mut().enumerate() {
                let col = g * k_count + k;
                let mut acc = p.assign_b.get(0, col);
                for c in 0..wide {
                    acc += xdot[i][c] * p.assign_w.get(c, col);
                }
                *sc = acc;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|v| (v - max).exp()).sum();
            for k in 0..k_count {
                let assign = (scores[k] - max).exp() / denom;
                for j in 0..s {
                    y[k][j] += att * assign * (xdot[i][g * s + j] - p.centers.get(k, j));
                }
            }
        }
    }

    let mut out = Vec::with_capacity(k_count * s);
    for row in &y {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(row.iter().map(|v| v / norm));
    }
    if cfg.global_norm {
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

pub fn bce_oracle(y: &[f64], z: &[f64]) -> f64 {
    let eps = 1e-6;
    let mut total = 0.0;
    for (t, logit) in y.iter().zip(z) {
        let p = sigmoid(*logit).clamp(eps, 1.0 - eps);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    total / y.len() as f64
}

pub fn kl_soft_oracle(teacher: &[f64], student: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let (p, q) = (soft(teacher), soft(student));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect()
}

/// Two-layer uniform mixture loss, layer by layer: 12 leaf BCEs, 4 inner
/// mixture BCEs with their leaf distillation, and the root BCE with its
/// distillation over the inner mixtures.
pub fn mod_loss_oracle(y: &[f64], leaves: &[Vec<f64>], inner: usize, per: usize, t: f64) -> f64 {
    let mut total = 0.0;
    let mut inner_logits = Vec::new();
    for m in 0..inner {
        let group: Vec<&[f64]> = (0..per).map(|l| leaves[m * per + l].as_slice()).collect();
        let z = mean_of(&group);
        for leaf in &group {
            total += bce_oracle(y, leaf);
            if t > 0.0 {
                total += t * t * kl_soft_oracle(&z, leaf, t);
            }
        }
        total += bce_oracle(y, &z);
        inner_logits.push(z);
    }
    let refs: Vec<&[f64]> = inner_logits.iter().map(|v| v.as_slice()).collect();
    let root = mean_of(&refs);
    total += bce_oracle(y, &root);
    if t > 0.0 {
        for z in &inner_logits {
            total += t * t * kl_soft_oracle(&root, z, t);
        }
    }
    total
}

/// AP@K recomputing precision at every hit from scratch.
pub fn ap_bruteforce(rel: &[u8], n_positive: usize, k: usize) -> f64 {
    if n_positive == 0 {
        return 0.0;
    }
    let cut = rel.len().min(k);
    let mut sum = 0.0;
    for i in 0..cut {
        if rel[i] == 1 {
            let hits = (0..=i).filter(|&j| rel[j] == 1).count();
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / n_positive as f64
}

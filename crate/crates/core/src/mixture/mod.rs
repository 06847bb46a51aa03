//! Logit mixing, temperature softening, the mixture loss with online
//! distillation, and its layered generalization to mixtures of mixtures.

mod tree;

pub use tree::{mod_loss, tree_loss, MixtureNode, NodeLoss, TreeLoss};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{log_softmax, softmax};

/// Distillation settings. `temperature == 0` disables distillation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Block distillation gradients into the teacher (ablation switch).
    pub stop_grad_teacher: bool,
}

impl DistillConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature {temperature} must be >= 0")));
        }
        Ok(Self {
            temperature,
            stop_grad_teacher: false,
        })
    }

    pub fn enabled(&self) -> bool {
        self.temperature > 0.0
    }
}

/// `z^e = Σ_m w_m z^m`.
pub fn mix_logits(children: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if children.is_empty() {
        return shape_err("mixing zero children");
    }
    if children.len() != weights.len() {
        return shape_err(format!(
            "{} children but {} weights",
            children.len(),
            weights.len()
        ));
    }
    let n = children[0].len();
    if let Some(bad) = children.iter().find(|c| c.len() != n) {
        return shape_err(format!("child logits of length {} vs {n}", bad.len()));
    }
    validate_weights(weights)?;
    let mut out = vec![0.0; n];
    for (c, &w) in children.iter().zip(weights) {
        for (o, z) in out.iter_mut().zip(c.iter()) {
            *o += w * z;
        }
    }
    Ok(out)
}

pub(crate) fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Domain(format!("mixing weights must be non-negative: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("mixing weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// `softmax(z / T)`.
pub fn soften(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "soften requires T > 0, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = z.iter().map(|x| x / temperature).collect();
    softmax(&scaled)
}

/// `KL(softmax(p/T) ‖ softmax(q/T))` computed in log space.
pub(crate) fn softened_kl(parent: &[f64], child: &[f64], temperature: f64) -> Result<f64> {
    Ok(softened_kl_parts(parent, child, temperature)?.kl)
}

pub(crate) struct KlParts {
    pub p: Vec<f64>,
    pub log_p: Vec<f64>,
    pub q: Vec<f64>,
    pub log_q: Vec<f64>,
    pub kl: f64,
}

pub(crate) fn softened_kl_parts(parent: &[f64], child: &[f64], t: f64) -> Result<KlParts> {
    if parent.len() != child.len() {
        return shape_err(format!(
            "parent logits {} vs child logits {}",
            parent.len(),
            child.len()
        ));
    }
    let log_p = log_softmax(&parent.iter().map(|x| x / t).collect::<Vec<_>>())?;
    let log_q = log_softmax(&child.iter().map(|x| x / t).collect::<Vec<_>>())?;
    let p: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
    let q: Vec<f64> = log_q.iter().map(|x| x.exp()).collect();
    let kl = p
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .map(|(pi, (lp, lq))| pi * (lp - lq))
        .sum::<f64>()
        .max(0.0);
    Ok(KlParts {
        p,
        log_p,
        q,
        log_q,
        kl,
    })
}

/// `T² · Σ_m KL(soften(parent, T) ‖ soften(child_m, T))`.
pub fn distill_term(parent: &[f64], children: &[&[f64]], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "distillation requires T > 0, got {temperature}"
        )));
    }
    let mut sum = 0.0;
    for c in children {
        sum += softened_kl(parent, c, temperature)?;
    }
    Ok(temperature * temperature * sum)
}

/// Parts of the one-layer mixture loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureLoss {
    pub total: f64,
    pub child_label: Vec<f64>,
    pub mixture_label: f64,
    pub distill: f64,
}

/// `Σ_m L_bce(y, p_m) + L_bce(y, p_e) + T² Σ_m KL(Soft(p_e,T) ‖ Soft(p_m,T))`,
/// the distillation part omitted when `T == 0`.
pub fn mixture_loss(
    y: &[f64],
    children: &[&[f64]],
    weights: &[f64],
    temperature: f64,
) -> Result<MixtureLoss> {
    let (loss, _) = mixture_loss_grad(y, children, weights, &DistillConfig::new(temperature)?)?;
    Ok(loss)
}

/// [`mixture_loss`] plus gradients with respect to each child's logits.
pub fn mixture_loss_grad(
    y: &[f64],
    children: &[&[f64]],
    weights: &[f64],
    distill: &DistillConfig,
) -> Result<(MixtureLoss, Vec<Vec<f64>>)> {
    let tree = MixtureNode::Mix {
        children: (0..children.len()).map(MixtureNode::Leaf).collect(),
        weights: weights.to_vec(),
    };
    let out = tree_loss(y, &tree, children, distill, true)?;
    let root = &out.nodes[0];
    let loss = MixtureLoss {
        total: out.total,
        child_label: out.nodes[1..].iter().map(|n| n.label_loss).collect(),
        mixture_label: root.label_loss,
        distill: root.distill_loss,
    };
    Ok((loss, out.leaf_grads))
}

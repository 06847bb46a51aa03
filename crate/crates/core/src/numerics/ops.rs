use crate::error::{shape_err, Error, Result};

/// Default probability clamp for binary cross entropy.
pub const BCE_EPS: f64 = 1e-6;
/// Default norm floor for L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Domain("log_softmax of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(z.iter().map(|&x| x - lse).collect())
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&x| sigmoid_scalar(x)).collect()
}

/// Mean binary cross entropy over classes, probabilities clamped to
/// `[eps, 1 - eps]`.
pub fn bce_with_logits(y: &[f64], z: &[f64], eps: f64) -> Result<f64> {
    if y.len() != z.len() {
        return shape_err(format!("bce labels {} vs logits {}", y.len(), z.len()));
    }
    if y.is_empty() {
        return Err(Error::Domain("bce over zero classes".into()));
    }
    let sum: f64 = y
        .iter()
        .zip(z)
        .map(|(&yi, &zi)| {
            let p = sigmoid_scalar(zi).clamp(eps, 1.0 - eps);
            let q = sigmoid_scalar(-zi).clamp(eps, 1.0 - eps);
            -(yi * p.ln() + (1.0 - yi) * q.ln())
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Loss and gradient with respect to the logits. Inside the clamped region
/// the loss is flat, so the gradient there is zero.
pub fn bce_with_logits_grad(y: &[f64], z: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    let loss = bce_with_logits(y, z, eps)?;
    let n = y.len() as f64;
    let grad = y
        .iter()
        .zip(z)
        .map(|(&yi, &zi)| {
            let p = sigmoid_scalar(zi);
            if p < eps || p > 1.0 - eps {
                0.0
            } else {
                (p - yi) / n
            }
        })
        .collect();
    Ok((loss, grad))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let denom = l2_norm(v).max(eps);
    v.iter().map(|x| x / denom).collect()
}

/// Backward of [`l2_normalize`]: given input `v` and upstream gradient,
/// returns the gradient with respect to `v`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64], eps: f64) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm < eps {
        return grad_out.iter().map(|g| g / eps).collect();
    }
    let proj: f64 = v.iter().zip(grad_out).map(|(x, g)| x * g).sum::<f64>() / (norm * norm);
    v.iter()
        .zip(grad_out)
        .map(|(x, g)| (g - x * proj) / norm)
        .collect()
}

/// Numeric precision used for stored parameters. Kernels always compute in
/// `f64`; `F32` rounds parameters after every optimizer update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }

    pub fn round_all(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            xs.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(matches!(softmax(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let p = softmax(&z).unwrap();
        let lp = log_softmax(&z).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
    }

    #[test]
    fn bce_examples() {
        let l = bce_with_logits(&[1.0, 0.0], &[0.0, 0.0], BCE_EPS).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = bce_with_logits(&[1.0], &[40.0], BCE_EPS).unwrap();
        assert!((l - (-(1.0f64 - 1e-6).ln())).abs() < 1e-18);
        assert!((l - 1e-6).abs() < 1e-11);
        assert!(matches!(
            bce_with_logits(&[1.0], &[0.0, 1.0], BCE_EPS),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bce_matches_scalar_oracle() {
        let mut s = 12345u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let y: Vec<f64> = (0..16).map(|_| if next() < 0.5 { 0.0 } else { 1.0 }).collect();
        let z: Vec<f64> = (0..16).map(|_| next() * 8.0 - 4.0).collect();
        let mut acc = 0.0;
        for i in 0..16 {
            let p = 1.0 / (1.0 + (-z[i]).exp());
            acc += -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
        }
        let want = acc / 16.0;
        let got = bce_with_logits(&y, &z, BCE_EPS).unwrap();
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0], NORM_EPS), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0], NORM_EPS), vec![0.0, 0.0]);
        let u = [0.6, 0.8];
        let n = l2_normalize(&u, NORM_EPS);
        for (a, b) in u.iter().zip(&n) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_rounding() {
        let x = 0.1f64;
        assert_eq!(Precision::F64.round(x), x);
        assert_eq!(Precision::F32.round(x), 0.1f32 as f64);
        assert_eq!("f32".parse::<Precision>().unwrap(), Precision::F32);
    }
}

use crate::error::{shape_err, Error, Result};

/// Default central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_gradcheck<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return shape_err(format!(
            "gradcheck params {} vs analytic {}",
            params.len(),
            analytic.len()
        ));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{bce_with_logits, bce_with_logits_grad, BCE_EPS};

    #[test]
    fn square_function() {
        let err = finite_diff_gradcheck(|x| Ok(x[0] * x[0]), &[3.0], &[6.0], GRADCHECK_STEP).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn bce_gradient() {
        let y = [1.0, 0.0, 0.0, 1.0, 1.0];
        let z = [0.3, -1.1, 2.0, -0.4, 0.05];
        let (_, g) = bce_with_logits_grad(&y, &z, BCE_EPS).unwrap();
        let err = finite_diff_gradcheck(|zz| bce_with_logits(&y, zz, BCE_EPS), &z, &g, GRADCHECK_STEP)
            .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_objective_propagates() {
        let r = finite_diff_gradcheck(|x| Ok(1.0 / (x[0] - 1e-5)), &[0.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_diff_gradcheck(|x| Ok(x[0] * x[0]), &[3.0], &[5.0], GRADCHECK_STEP).unwrap();
        assert!(err > 0.1);
    }
}

use crate::error::{shape_err, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut Matrix,
    grads: &Matrix,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.shape() != grads.shape()
        || params.shape() != state.m.shape()
        || params.shape() != state.v.shape()
    {
        return shape_err(format!(
            "adam params {:?}, grads {:?}, state {:?}",
            params.shape(),
            grads.shape(),
            state.m.shape()
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let p = params.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, &g) in grads.data().iter().enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

//! Dense numeric kernels: matrices, activations, losses, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod matrix;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_gradcheck, GRADCHECK_STEP};
pub use matrix::{axpy, dot, Matrix};
pub use ops::{
    bce_with_logits, bce_with_logits_grad, l2_norm, l2_normalize, l2_normalize_backward,
    log_softmax, sigmoid, sigmoid_scalar, softmax, Precision, BCE_EPS, NORM_EPS,
};

//! Named parameter tensors and helpers shared by models and the trainer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Matrix;

/// Structured access to the learnable tensors of a model component.
///
/// Visiting order is fixed and defines the checkpoint tensor order.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    /// Concatenation of every tensor in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, m| out.extend_from_slice(m.data()));
        out
    }

    /// Inverse of [`Parameters::flatten`]. Panics on length mismatch.
    fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, m| {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "unflatten length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, m| m.fill(0.0));
    }

    /// Sum of squares over decayed tensors (weights and centers, not biases).
    fn decayed_sum_sq(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |name, m| {
            if is_decayed(name) {
                s += m.sum_sq();
            }
        });
        s
    }
}

/// L2 regularization applies to everything except bias vectors.
pub fn is_decayed(name: &str) -> bool {
    !name.ends_with("_b")
}

/// Gaussian init with std `1/sqrt(fan_in)`, where fan_in is the row count.
pub fn init_weight(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    gaussian(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

//! Minimal dense-tensor engine with reverse-mode automatic differentiation.

mod dense;
mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use tape::{Gradients, Index, Tape, TensorId, COSINE_NORM_FLOOR};

use crate::error::Result;

/// Slope of the leaky ReLU applied to attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Epsilon inside every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    /// Cosine distance between two equal-length vectors, as a scalar.
    pub fn cosine_distance(&mut self, v: TensorId, w: TensorId) -> Result<TensorId> {
        let d = self.value(v).numel();
        let v = self.reshape(v, vec![1, d])?;
        let d = self.value(w).numel();
        let w = self.reshape(w, vec![1, d])?;
        let per_row = self.row_cosine_distance(v, w)?;
        self.sum(per_row)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }
}

//! Dense `f64` tensors, a reverse-mode autodiff graph and Adam.

mod adam;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use ops::{cross_entropy_logits, layer_norm, matmul, softmax_rows};
pub use params::{Bound, ParamKind, ParameterSet};
pub use tensor::Tensor;

use rand::Rng;

/// Layer-norm epsilon used by every normalization in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Glorot/Xavier uniform bound for a `[fan_in × fan_out]` matrix.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Matrix with entries drawn uniformly from `±glorot_bound(rows, cols)`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape and data agree")
}

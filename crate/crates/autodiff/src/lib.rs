//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive applications in evaluation order. Leaves
//! created with [`Graph::leaf`] receive gradients; [`Graph::constant`]
//! inputs do not. [`Graph::backward`] walks the record once in reverse.
//!
//! ```
//! use sehm_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod adam;
mod check;
mod error;
mod graph;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{analytic_gradient, finite_difference_check, numeric_gradient};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId, DEFAULT_EXP_CLAMP};
pub use ops::PrimitiveKind;
pub use tensor::Tensor;

/// Plain-value matrix product `a (m x k) * b (k x n)` for code that does not
/// need gradients.
pub fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    ops::gemm(m, k, n, a, false, b, false, out, false);
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    ops::sigmoid(x)
}

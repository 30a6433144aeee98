//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every op records a node whose backward rule is written in terms of other
//! recorded ops. Calling [`grad`] with `create_graph = true` therefore yields
//! gradients that are themselves differentiable, which is what lets a loss be
//! differentiated through a sequence of unrolled SGD steps.
//!
//! ```
//! use iadd::gradcore::{grad, Tensor};
//!
//! let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap().sum();
//! let g = grad(&y, &[&x], true).unwrap().into_vec().remove(0);
//! assert_eq!(g.item(), 12.0);
//! let gg = grad(&g.sum(), &[&x], false).unwrap().into_vec().remove(0);
//! assert_eq!(gg.item(), 12.0);
//! ```
//!
//! Graphs are reference counted and freed as soon as the last handle to the
//! loss goes away.

mod backward;
mod check;
mod conv;
mod elementwise;
mod nn;
mod real;
mod shape;
pub mod suite;
mod tensor;

#[cfg(test)]
mod tests;

pub use backward::{grad, Gradients};
pub use check::grad_check;
pub use nn::PlaneMap;
pub use real::{Precision, Real};
pub use tensor::{is_grad_enabled, no_grad, Tensor};

/// Epsilon added to the variance in instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a single element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite function value when perturbing input {input}, coordinate {coordinate}")]
    NonFinite { input: usize, coordinate: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

//! Dense tensors and a tape-based reverse-mode autodiff graph.
//!
//! Everything is `f64`. Attention tensors follow the `[batch, heads, time,
//! head_size]` layout. Broadcasting is limited to leading batch axes.

mod gemm;
mod graph;
mod tensor;

use thiserror::Error;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub const RMS_EPS: f64 = 1e-6;

//! Dense tensors with a define-by-run reverse-mode tape.

pub mod gradcheck;
mod graph;
pub mod nn;
pub mod ten1;
mod value;

pub use graph::{Graph, Var, LOG_CLAMP, NORM_EPS};
pub use value::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },
    #[error("{op}: invalid parameter: {reason}")]
    InvalidParameter { op: &'static str, reason: String },
    #[error("attention needs at least one key")]
    EmptyKeys,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {which} row {row} sums to {sum}, expected 1")]
    NotStochastic {
        op: &'static str,
        which: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

use thiserror::Error;

use crate::tensor::TensorError;

/// Failures raised while building or running the model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("study {study}: view {view} is {found:?}, expected {expected:?}")]
    ImageSize {
        study: String,
        view: usize,
        expected: [usize; 2],
        found: Vec<usize>,
    },
    #[error("prefix of {len} tokens exceeds the decoder context of {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("prefix must start with BOS")]
    MissingBos,
    /// Carries a JSON dump of the offending distributions.
    #[error("non-finite {what}")]
    NonFinite { what: String, dump: String },
}

use thiserror::Error;

/// Errors raised by tensor construction, kernels and the tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    DimMismatch { op: &'static str, dim: &'static str, expected: usize, actual: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("malformed tensor data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, reason: reason.into() }
}

use std::path::PathBuf;

use glod_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum GlodError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = GlodError> = std::result::Result<T, E>;

impl GlodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlodError::Io { path: path.into(), source }
    }
}

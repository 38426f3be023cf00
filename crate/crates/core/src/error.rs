use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent network, kernel, or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes that cannot be combined by the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data that violates an operation's preconditions.
    #[error("data error: {0}")]
    Data(String),

    /// An operation was invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("unsupported image format {format:?} in {path}; convert to PNM or PNG first (see README, \"Converting datasets\")")]
    UnsupportedFormat { path: PathBuf, format: String },

    #[error("checkpoint integrity error at byte {offset}: {detail}")]
    Integrity { offset: u64, detail: String },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("training aborted at step {step} (lr {lr}): {reason}")]
    TrainingAborted { step: u64, lr: f32, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the failure was caused by user input rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::State(_) | Error::TrainingAborted { .. })
    }
}

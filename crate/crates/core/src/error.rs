use thiserror::Error;

/// Errors raised anywhere in the model, training, and tooling stack.
#[derive(Debug, Error)]
pub enum GmtError {
    /// Inconsistent shapes, invalid hyperparameters, or mismatched configs.
    #[error("configuration error: {0}")]
    Config(String),
    /// A value outside the domain of an operation (zero-norm rows, bad ids, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A training step produced a non-finite loss or gradient.
    #[error("training step error: {0}")]
    Training(String),
    /// Malformed, truncated, or mismatched checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GmtError> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::GmtError::Config(format!($($arg)*)) };
}

macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::GmtError::Domain(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use domain_err;

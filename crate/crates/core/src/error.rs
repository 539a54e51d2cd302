use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix factorization failed after jitter escalation ({0})")]
    Factorization(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invariant violated: {0}")]
    Assertion(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

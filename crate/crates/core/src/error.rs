use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A recorded tape node produced a NaN or infinity.
    #[error("non-finite value at tape node {node} ({op})")]
    NumericOverflow { node: usize, op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("filter diverged at time step {step}")]
    Divergence { step: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

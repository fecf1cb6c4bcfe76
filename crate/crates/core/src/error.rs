use thiserror::Error;

/// Errors raised across the optimizer, the learning stack and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("empty population: {0}")]
    EmptyPopulation(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("config error at `{token}`: {reason}")]
    Config { token: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(token: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            token: token.into(),
            reason: reason.into(),
        }
    }
}

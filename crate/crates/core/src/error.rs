use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the change-detection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("type error: {0}")]
    Type(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("infeasible change spec: {0}")]
    Spec(String),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("non-finite loss {loss} at step {step} (learning rate {lr})")]
    NonFinite { step: usize, lr: f64, loss: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

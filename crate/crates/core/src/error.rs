use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("operands belong to different compute graphs")]
    GraphMismatch,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("config error in field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("record file error at line {line}: {msg}")]
    Record { line: usize, msg: String },

    #[error("judge error: {0}")]
    Judge(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

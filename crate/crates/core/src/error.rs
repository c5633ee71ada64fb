use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("attention row {row} has no visible column")]
    DegenerateRow { row: usize },

    #[error("label {label} out of range for vocabulary of size {vocab}")]
    Label { label: usize, vocab: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("id out of range: {0}")]
    IdOutOfRange(String),

    #[error("sequence of length {len} exceeds limit {max}")]
    Overflow { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    #[error("zero-norm embedding for sentence {index}")]
    ZeroNorm { index: usize },

    #[error("run directory {0} is not empty")]
    RunDirNotEmpty(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

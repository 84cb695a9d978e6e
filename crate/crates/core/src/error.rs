use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit reports. The CLI maps each variant onto an exit
/// code via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: parse error: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient runs: requested {requested}, have {available}")]
    InsufficientRuns { requested: usize, available: usize },

    #[error("UnknownExample: '{0}' was never seen during fitting")]
    UnknownExample(String),

    #[error("missing embedding for example '{0}'")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("degenerate ranking: {0}")]
    DegenerateRanking(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// 1 = validation, 2 = I/O, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

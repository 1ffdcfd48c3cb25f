use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A record that parses but breaks a data invariant (empty response, duplicate id, ...).
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("{path}: file is empty")]
    EmptyFile { path: PathBuf },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("ids missing: {0:?}")]
    MissingIds(Vec<u64>),

    #[error("unexpected ids not in corpus: {0:?}")]
    UnknownIds(Vec<u64>),

    #[error("dimension mismatch: expected {expected}, got {got} (id {id})")]
    DimensionMismatch { id: u64, expected: usize, got: usize },

    #[error("sample {id}: provider returned {got} log-probabilities, expected {expected}")]
    TokenCountMismatch { id: u64, expected: usize, got: usize },

    #[error("sample {id}: {message}")]
    Score { id: u64, message: String },

    #[error("samples exceed the maximum length of {max_len}: {ids:?}")]
    Oversized { max_len: usize, ids: Vec<u64> },

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True when the error signals a broken internal invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A single malformed line in a text or JSONL input.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {bad} of {total} lines malformed (tolerance {threshold}); first: {first}")]
    TooManyErrors {
        path: PathBuf,
        bad: usize,
        total: usize,
        threshold: f64,
        first: String,
    },

    #[error("{path}:{line}: dimension mismatch, expected {expected} values, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: non-finite value")]
    NonFinite { path: PathBuf, line: usize },

    #[error("{path}: header declares {expected} entries, found {found}")]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: duplicate token {token:?}")]
    DuplicateToken {
        path: PathBuf,
        line: usize,
        token: String,
    },

    #[error("{path}: unsupported format or version: {found}")]
    Version { path: PathBuf, found: String },

    #[error("{path}: checksum failure ({reason})")]
    Checksum { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite loss encountered at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("zero contributing pairs ({skipped} skipped as out of vocabulary)")]
    NoPairs { skipped: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
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
}

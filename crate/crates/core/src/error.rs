use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad category of a failure, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Validation,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value ({context})")]
    NonFinite { op: &'static str, context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{task}: unknown label {label:?}; expected one of: {}", candidates.join(", "))]
    UnknownLabel {
        task: String,
        label: String,
        candidates: Vec<String>,
    },

    #[error("similarity table for {task}: cell ({row}, {col}) {reason}")]
    SimTable {
        task: String,
        row: usize,
        col: usize,
        reason: String,
    },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Csv(e) if e.is_io_error() => ErrorKind::Io,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Validation,
        }
    }
}

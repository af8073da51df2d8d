use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across ingestion, modelling and detection.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no telemetry")]
    NoTelemetry,

    #[error("unimputable cell {0}: no observed values")]
    UnimputableCell(String),

    #[error("sample unavailable for cell {cell} at hour {anchor}: {reason}")]
    SampleUnavailable { cell: String, anchor: i64, reason: String },

    #[error("empty neighborhood")]
    EmptyNeighborhood,

    #[error("degenerate context")]
    DegenerateContext,

    #[error("untrainable dataset: {0}")]
    Untrainable(String),

    #[error("unknown cell {0}")]
    UnknownCell(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("config error at line {line}: key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("model file: {0}")]
    Model(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether the error stems from user input (bad config, malformed files)
    /// rather than from the data or the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Parse { .. } | Error::InvalidArgument(_) | Error::Shape(_) | Error::Model(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ScsfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScsfError {
    #[error("size error: {0}")]
    Size(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion error at row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("ingestion error: {message} (timestamp {timestamp})")]
    Timestamp { timestamp: String, message: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ScsfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScsfError::Io { path: path.into(), source }
    }
}

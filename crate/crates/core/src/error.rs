use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config hash {found} does not match the requested model config ({expected})")]
    ConfigHashMismatch { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("extractor error: {0}")]
    Extractor(String),

    #[error("image decode/encode error for {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

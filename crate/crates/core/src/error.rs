use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum ZfError {
    #[error("prompt exceeds the encoder context limit of {limit} tokens: {prompt:?}")]
    ContextOverflow { prompt: String, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("unknown config key `{key}` at line {line}")]
    UnknownConfigKey { key: String, line: usize },

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint parameter mismatch: missing={missing:?} unexpected={unexpected:?} shape_mismatch={shape_mismatch:?}")]
    CheckpointKeys {
        missing: Vec<String>,
        unexpected: Vec<String>,
        shape_mismatch: Vec<String>,
    },

    #[error("file format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("non-finite loss at iteration {iteration}: {details}")]
    NonFinite { iteration: u64, details: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ZfError>;

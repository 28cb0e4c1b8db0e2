use std::io;

use thiserror::Error;

/// Errors raised across ingestion, training, encoding and evaluation.
#[derive(Debug, Error)]
pub enum DhimError {
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl DhimError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DhimError::Argument(_) => 1,
            DhimError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DhimError>;

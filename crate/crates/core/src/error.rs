use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error at byte {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("scene generation failed: {0}")]
    Placement(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{file}: byte offset {offset}: {msg}")]
    Format { file: String, offset: u64, msg: String },

    #[error("{file}: unsupported format version {found} (expected {expected})")]
    Version {
        file: String,
        found: String,
        expected: String,
    },

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

    pub fn format(file: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

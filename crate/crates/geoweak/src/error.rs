//! Crate-wide error type and result alias.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on caller-supplied data failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A requested resource (tile, fixture, artifact) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Bytes were fetched but could not be decoded (raster, JSON, label file).
    #[error("decode error: {0}")]
    Decode(String),

    /// A transport-level failure. Retryable: the same request may succeed later.
    #[error("network error: {0}")]
    Network(String),

    /// A detector backend reported failure; the message carries its log excerpt.
    #[error("backend error: {0}")]
    Backend(String),

    /// Configuration file rejected (unknown key, out-of-range constant).
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Whether retrying the same operation may succeed (transient failures).
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Network(_))
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

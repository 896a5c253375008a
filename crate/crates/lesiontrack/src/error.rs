//! Crate-wide error type.
//!
//! A single enum keeps error plumbing simple across the pipeline stages; the
//! variants are grouped so the command-line frontend can map them onto its
//! exit codes (usage, data/format, numeric).

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by the lesion-tracking pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid arguments or configuration supplied by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// I/O failure, annotated with the file involved when known.
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the declared format.
    #[error("format error in {path:?}: {message}")]
    Format { path: PathBuf, message: String },

    /// Volumes or tensors with incompatible shapes/metadata were combined.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Numeric failure: singular matrices, non-finite losses or metrics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A precondition of an operation was violated by otherwise
    /// well-formed data (empty lesion, missing stage input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a format error.
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line frontend.
    ///
    /// 0 is success (never an `Error`), 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Dimension(_) | Error::InvalidInput(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

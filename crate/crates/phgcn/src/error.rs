//! Error types and the CLI exit-code contract.

use std::path::PathBuf;

use thiserror::Error;

/// Stable process exit codes used by every subcommand.
pub mod exit {
    /// Command completed.
    pub const SUCCESS: u8 = 0;
    /// A check the command performs failed (e.g. gradient check over threshold).
    pub const CHECK_FAILED: u8 = 1;
    /// Invalid configuration or usage.
    pub const CONFIG: u8 = 2;
    /// File I/O or on-disk format failure.
    pub const IO: u8 = 3;
    /// Non-finite values encountered in numeric data or training.
    pub const NUMERIC: u8 = 4;
}

/// Errors for the binary dataset (`PHGF`) and checkpoint (`PHGM`) formats.
///
/// Every variant carries the byte offset at which the problem was detected.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("truncated payload at offset {offset}: needed {needed} more bytes, {available} available")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("non-finite value at offset {offset} (image {image}, element {element})")]
    NonFinite {
        offset: u64,
        image: usize,
        element: usize,
    },
    #[error("{extra} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("invalid header field {field} at offset {offset}: {message}")]
    BadHeader {
        offset: u64,
        field: &'static str,
        message: String,
    },
}

/// Top-level library error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Map an error onto the exit-code contract.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => exit::CONFIG,
            Error::Format(FormatError::NonFinite { .. }) => exit::NUMERIC,
            Error::Format(_) => exit::IO,
            Error::Io { .. } => exit::IO,
            Error::NonFinite { .. } => exit::NUMERIC,
            Error::ShapeMismatch(_) | Error::Invalid(_) => exit::CONFIG,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

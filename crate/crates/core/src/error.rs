use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the binary container formats (motion files and checkpoints).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("truncated data: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("integrity check failed: stored crc {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("checkpoint does not match configuration (fingerprint {found:016x}, expected {expected:016x})")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("data error: {0}")]
    Data(String),
}

/// Broad failure category, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Other,
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::FingerprintMismatch { .. } => ErrorKind::Config,
            Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Data(_) => ErrorKind::Data,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::File { source, .. } => source.kind(),
            Error::Shape(_) | Error::Contract(_) => ErrorKind::Other,
        }
    }
}

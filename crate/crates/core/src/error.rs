use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("out of memory: requested {requested} floats with {live} live of {limit} allowed")]
    OutOfMemory {
        requested: usize,
        live: usize,
        limit: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated blob: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },

    #[error("header/blob length disagreement: header implies {expected} bytes, blob has {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("extent mismatch between image {image:?} and mask {mask:?}")]
    ExtentMismatch { image: Vec<usize>, mask: Vec<usize> },

    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },

    #[error("no foreground found after {0} patch draws")]
    NoForeground(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter or buffer `{0}`")]
    UnknownParameter(String),

    #[error("bad magic number in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { what: String, expected: u32, found: u32 },

    #[error("truncated file {what}: expected {expected} bytes, found {found}")]
    Truncated { what: String, expected: usize, found: usize },

    #[error("dimension mismatch in {what}: {detail}")]
    DimMismatch { what: String, detail: String },

    #[error("{what} has {found} bytes, expected exactly {expected}")]
    FileSize { what: String, expected: u64, found: u64 },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: spatial extent {extent} on axis {axis} is odd; pad the input to an even extent first")]
    OddExtent {
        op: &'static str,
        axis: usize,
        extent: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wedge is not padded; call pad_horizontal before encoding")]
    Unpadded,

    #[error("model mismatch: expected {expected}, found {found}")]
    ModelMismatch { expected: String, found: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while decoding one of the binary file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u8, found: u8 },

    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("unknown dtype tag {0}")]
    DType(u8),

    #[error("extent mismatch: {0}")]
    Extent(String),

    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// Variants are grouped by [`ErrorKind`] so front ends can map them onto a
/// stable exit-code contract.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u16, found: u16 },

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("shape mismatch for tensor {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite {what} at step {step} in {tensor:?}")]
    NonFinite {
        step: usize,
        tensor: String,
        what: &'static str,
    },
}

/// Coarse classification of [`Error`] values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Format,
    Shape,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Format { .. }
            | Error::Truncated { .. }
            | Error::Dimension(_)
            | Error::BadMagic { .. }
            | Error::BadVersion { .. } => ErrorKind::Format,
            Error::Parameter(_)
            | Error::Config(_)
            | Error::UnknownTensor(_)
            | Error::MissingTensor(_)
            | Error::ShapeMismatch { .. } => ErrorKind::Shape,
            Error::Domain(_) | Error::Contract(_) | Error::State(_) | Error::NonFinite { .. } => {
                ErrorKind::Runtime
            }
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the lab.
///
/// Variants are grouped so the CLI can map them onto its exit-code contract
/// (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid bounding box [{x1}, {y1}, {x2}, {y2}] for a {width}x{height} image")]
    InvalidBox {
        x1: i64,
        y1: i64,
        x2: i64,
        y2: i64,
        width: u32,
        height: u32,
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no JSON object found in response")]
    ResponseParse,

    #[error("response schema error: {0}")]
    ResponseSchema(String),

    #[error("response validation error: {0}")]
    ResponseValidation(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },

    #[error("endpoint returned HTTP {status}")]
    HttpStatus { status: u16, attempts: u32 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch")]
    CheckpointChecksum,

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } | Error::ZeroNorm => {
                ErrorClass::Numeric
            }
            Error::InvalidArgument(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}

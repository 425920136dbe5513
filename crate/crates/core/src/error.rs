use std::path::PathBuf;

use mtau_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input extent {height}x{width} is not divisible by {multiple}; pad each side to a multiple of {multiple} first")]
    IndivisibleInput {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("invalid label {value} at (z={z}, y={y}, x={x}); expected one of 0, 1, 2, 4")]
    InvalidLabel {
        value: u8,
        z: usize,
        y: usize,
        x: usize,
    },
    #[error("{context}: {reason}")]
    InvalidData { context: String, reason: String },
    #[error("extent mismatch in {op}: {left:?} vs {right:?}")]
    ExtentMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("hausdorff distance is undefined: {0} mask is empty")]
    EmptyMask(&'static str),
    #[error("targets contain a single class; use the default threshold 0.5")]
    SingleClass,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("slice index {0} is missing")]
    MissingSlice(usize),
    #[error("{path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
    #[error("{path}: {error}")]
    Json {
        path: PathBuf,
        error: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), error: source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), error: source }
    }

    pub(crate) fn data(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidData { context: context.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: spatial extent {height}x{width} must be even")]
    OddSpatial {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("{op}: batch is empty")]
    EmptyBatch { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: gradient shape {actual:?} does not match the saved forward output {expected:?}")]
    StaleContext {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength { op: &'static str, len: usize, shape: Vec<usize> },

    #[error("{op}: axis {axis} out of range for a {ndim}-d tensor")]
    Axis { op: &'static str, axis: usize, ndim: usize },

    #[error("{op}: index {index} out of range at coordinate {coordinate} (bound {bound})")]
    Index { op: &'static str, coordinate: usize, index: usize, bound: usize },

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

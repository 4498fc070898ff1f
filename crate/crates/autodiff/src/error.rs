use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("expected a scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("{op} cannot be differentiated twice")]
    HigherOrderUnsupported { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("softmax over a slice where every entry is -inf")]
    DegenerateDistribution,
    #[error("backward already ran on this tape; record a fresh forward pass")]
    StaleTape,
    #[error("backward expects a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("numeric check failed: {0}")]
    Numeric(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

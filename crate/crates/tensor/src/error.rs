use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: zero-extent input shape {shape:?}")]
    EmptyInput { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward already ran on this tape; run a new forward pass first")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch norm in train mode needs more than one value per channel")]
    BatchTooSmall,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: parameter error: {detail}")]
    Param { op: &'static str, detail: String },
    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardReplayed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("rten: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Param { op, detail: detail.into() }
    }

    /// True for errors raised by non-finite arithmetic rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, TensorError::NonFinite { .. })
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

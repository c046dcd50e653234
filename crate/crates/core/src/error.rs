use relcorr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config `{key}`: {detail}")]
    Config { key: &'static str, detail: String },
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

impl CoreError {
    pub fn config(key: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Config { key, detail: detail.into() }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, CoreError::Tensor(e) if e.is_numeric())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

use std::path::PathBuf;

use relcorr_core::CoreError;
use relcorr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("config line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("config `{key}`: {detail}")]
    Key { key: String, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Core(CoreError::Tensor(e))
    }
}

impl CliError {
    pub fn key(key: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Key { key: key.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

use matchflow_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("corrupted weights file: {0}")]
    Corruption(String),
    #[error("shape error for parameter `{name}`: expected {expected:?}, found {found:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("tile plan error: {0}")]
    Plan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

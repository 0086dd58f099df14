use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{op}` at flat index {index}")]
    NonFinite { op: String, index: usize },
    #[error("non-finite value in gradient check for parameter {param} at coordinate {coord}")]
    NonFiniteCheck { param: usize, coord: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}

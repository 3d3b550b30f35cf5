use thiserror::Error;
use tsnas_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Invalid configuration or search space.
    #[error("config: {0}")]
    Config(String),
    /// Malformed CSV or dataset; `row` is 1-based over data rows.
    #[error("data: {msg}")]
    Data { msg: String, row: Option<usize>, column: Option<String> },
    /// A caller broke an operation's precondition.
    #[error("contract: {0}")]
    Contract(String),
    #[error("genotype: {0}")]
    Genotype(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Training or search produced a non-finite loss.
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data { msg: msg.into(), row: None, column: None }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

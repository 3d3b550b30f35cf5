use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    /// Operand shapes are illegal for the primitive.
    #[error("{primitive}: shape error: {detail}")]
    Shape { primitive: &'static str, detail: String },
    /// A primitive produced NaN or infinity.
    #[error("{primitive}: numeric fault (non-finite output)")]
    NumericFault { primitive: &'static str },
    /// API misuse: consumed tape, non-scalar loss, missing gradient, ...
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { primitive, detail: detail.into() }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        TensorError::Contract(msg.into())
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

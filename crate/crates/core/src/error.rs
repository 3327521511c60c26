use dist_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// The frozen spatial encoder changed, or another hard invariant broke.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A statistic is undefined for the given input (e.g. zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A training run ended below its required accuracy.
    #[error("training did not converge: {0}")]
    Convergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SehmError {
    #[error(transparent)]
    Autodiff(#[from] sehm_autodiff::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("stale explanation inputs: attention weights and theta come from different forward passes")]
    StalePass,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SehmError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SehmError::Config(msg.into()))
}

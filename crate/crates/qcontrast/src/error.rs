use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("environment: {0}")]
    Env(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("data format: {0}")]
    Format(String),
    #[error("statistics: {0}")]
    Stats(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

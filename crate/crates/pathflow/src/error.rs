use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathflowError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("index {index} out of bounds (n_steps = {n_steps})")]
    IndexOutOfBounds { index: usize, n_steps: usize },

    #[error("state outside domain of the generator: {0}")]
    DomainViolation(String),

    #[error("covariance matrix not positive definite at t = {t}")]
    NotPositiveDefinite { t: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PathflowError>;

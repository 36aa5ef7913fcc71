use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid format: {0}")]
    InvalidFormat(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite input element at index {0}")]
    NonFiniteInput(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid interval: [{a}, {b}] outside support [{lo}, {hi}]")]
    InvalidInterval { a: f64, b: f64, lo: f64, hi: f64 },

    #[error("quadrature did not converge: requested {requested:e}, achieved {achieved:e}")]
    QuadratureTolerance { requested: f64, achieved: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

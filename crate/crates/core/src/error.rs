use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("geometry check failed: {0}")]
    Geometry(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    /// An iterative solver ran out of budget. Carries the best iterate so
    /// callers can still inspect it.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

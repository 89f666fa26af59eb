use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} did not converge (residual {residual:e} after {iterations} iterations)")]
    NonConvergence {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("monotonic improvement violated at round {round}: J went from {before} to {after}")]
    MonotonicityViolation { round: usize, before: f64, after: f64 },

    #[error("drift functional returned {value} (< 0) at state {state}")]
    NegativeDrift { state: usize, value: f64 },

    #[error("neighbourhood projection failed: {0}")]
    Projection(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

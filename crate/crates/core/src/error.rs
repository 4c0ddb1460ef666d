use thiserror::Error;

/// Errors produced by the model, inference engines and I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Newton's method hit its iteration cap. Carries the last iterate so the
    /// caller can inspect or reuse it.
    #[error("newton iteration did not converge after {iterations} steps (gradient max-norm {grad_norm:e})")]
    NotConverged {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    /// A rank-one downdate or determinant-lemma factor fell below the
    /// degeneracy threshold.
    #[error("numerical degeneracy in rank-one recursion at step {step}: factor {factor:e}")]
    Degenerate { step: usize, factor: f64 },

    /// The variational bound decreased across a full cycle.
    #[error("lower bound decreased by {decrease:e} at cycle {cycle}")]
    BoundDecreased { cycle: usize, decrease: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

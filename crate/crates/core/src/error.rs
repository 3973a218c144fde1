use thiserror::Error;

/// Errors raised by the influence engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})"
    )]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("ill-conditioned inversion: retained eigenvalue {value:.3e} is below 1e-12 of the spectral scale {scale:.3e}")]
    IllConditioned { value: f64, scale: f64 },

    #[error("matrix is not positive semi-definite (eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("class {class} has no support samples in task {task}")]
    EmptyClass { task: u64, class: usize },

    #[error("meta-training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite Hessian entry for task {task} at coordinate {coordinate}")]
    NonFiniteHessian { task: u64, coordinate: usize },

    #[error("dense Hessian requested for q = {q}, above the cap of {cap}")]
    DenseCapExceeded { q: usize, cap: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

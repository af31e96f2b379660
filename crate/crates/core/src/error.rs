use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label out of range at index {index}: class {label} with {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("solver did not converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("conjugate gradient breakdown at iteration {iter}: {reason} (residual {residual:.3e})")]
    CgBreakdown {
        iter: usize,
        reason: &'static str,
        residual: f64,
    },
    #[error("lower-level optimization diverged at step {step}")]
    Divergence { step: usize },
    #[error("non-finite adjoint at reverse step {step}")]
    NonFiniteAdjoint { step: usize },
    #[error("finite-difference budget exceeded: {coords} free coordinates, budget {budget}")]
    FdBudget { coords: usize, budget: usize },
    #[error("infeasible projection: {0}")]
    Infeasible(String),
    #[error("baseline losses not populated; run compute_baseline first")]
    MissingBaseline,
    #[error("unknown method name: {0}")]
    UnknownMethod(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

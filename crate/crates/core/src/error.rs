use thiserror::Error;

/// Errors raised by the discretization, solvers and the CLI layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coincident points passed to the kernel")]
    CoincidentPoints,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("problem size {requested} exceeds configured cap {cap}")]
    TooLarge { requested: usize, cap: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("{method} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("monotone iteration diverged after {iterations} iterations (sup-norm {sup_norm:e})")]
    Diverged { iterations: usize, sup_norm: f64 },

    #[error("solution check failed: {0}")]
    Invariant(String),

    #[error("comparison failure at node {node}: iterate {value:e} exceeds cap {cap:e}")]
    ComparisonFailure { node: usize, value: f64, cap: f64 },

    #[error("inconsistent bisection: {0}")]
    InconsistentBracket(String),

    #[error("mountain pass search failed: {0}")]
    MountainPass(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

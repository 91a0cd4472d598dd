use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("{what} did not converge after {iterations} iterations (last change {residual:e})")]
    Divergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("constraint {constraint}: chain inconsistent at level {level} (residual {residual:e}, tol {tol:e})")]
    ChainInconsistent {
        constraint: usize,
        level: usize,
        residual: f64,
        tol: f64,
    },
    #[error("constraint {constraint}: declared order {declared} overstated, control appears at level {level}")]
    OrderOverstated {
        constraint: usize,
        declared: usize,
        level: usize,
    },
    #[error("constraint {constraint}: control never appears up to depth {depth}")]
    InfiniteOrder { constraint: usize, depth: usize },
    #[error("incomplete problem: {0}")]
    IncompleteProblem(String),
    #[error("no multiplier: {0}")]
    NoMultiplier(String),
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("lp: {0}")]
    Lp(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by model evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },
}

/// Failure to evaluate a log-density. Samplers treat this as a rejection.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("log-density is not finite")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum HmcError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("initial point for chain {chain} has no finite log-density: {source}")]
    BadInit { chain: usize, source: EvalError },
    #[error("kept draw could not be unpacked: {0}")]
    Unpack(#[source] EvalError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("point is outside the barrier domain: {0}")]
    Infeasible(String),
    #[error("barrier objective overflowed")]
    Overflow,
    #[error("line search stalled after {halvings} halvings")]
    Stall { halvings: usize },
    #[error("invalid control problem: {0}")]
    Problem(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    /// The control problem admits no strictly feasible starting point.
    #[error("infeasible control problem: {0}")]
    Infeasible(String),
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sampling failed at t = {t}: {source}")]
    Sampling { t: usize, source: HmcError },
    #[error("control problem failed at t = {t}: {source}")]
    Control { t: usize, source: SolverError },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

use std::path::PathBuf;

use bayes_mpc::{ConfigError, LoopError, SolverError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("planning: {0}")]
    Solver(#[from] SolverError),
    #[error("sampling: {0}")]
    Sampling(#[from] bayes_mpc::HmcError),
    #[error("samples file: {0}")]
    Samples(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const NOT_CONVERGED: u8 = 2;
    pub const INFEASIBLE: u8 = 3;
}

fn solver_code(e: &SolverError) -> u8 {
    match e {
        SolverError::Infeasible(_) => exit::INFEASIBLE,
        _ => exit::NOT_CONVERGED,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Infeasible(_)) | CliError::Loop(LoopError::Config(ConfigError::Infeasible(_))) => {
                exit::INFEASIBLE
            }
            CliError::Loop(LoopError::Control { source, .. }) => solver_code(source),
            CliError::Loop(LoopError::Config(_)) => exit::CONFIG,
            CliError::Loop(_) | CliError::Sampling(_) => exit::NOT_CONVERGED,
            CliError::Solver(e) => solver_code(e),
            CliError::Config(_) | CliError::Samples(_) | CliError::Io { .. } | CliError::Csv(_) => exit::CONFIG,
        }
    }
}

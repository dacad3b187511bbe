//! Data-to-controller stochastic model predictive control.
//!
//! The pipeline has three stages:
//!
//! 1. [`bayes`] builds the joint posterior over the state trajectory, the
//!    model parameters and the future disturbances given input/output data.
//! 2. [`hmc`] draws samples from that posterior with Hamiltonian Monte Carlo.
//! 3. [`smpc`] turns the samples into a deterministic optimisation problem
//!    (Monte Carlo cost, sigmoid-relaxed chance constraints, log barriers) and
//!    solves it with a continuation Newton method.
//!
//! [`closed_loop`] ties the three together against a simulated plant from
//! [`models`], and [`config`] holds the experiment description.

pub mod bayes;
pub mod closed_loop;
pub mod config;
pub mod error;
pub mod hmc;
pub mod models;
pub mod seed;
pub mod smpc;
mod sum;

pub use bayes::{sample_posterior, Dataset, ParamPrior, PosteriorSample, PosteriorTarget, PriorSpec, SampleSet};
pub use closed_loop::{run_closed_loop, ClosedLoopRecord, ClosedLoopRun, HorizonSnapshot};
pub use config::ExperimentConfig;
pub use error::{ConfigError, EvalError, HmcError, LoopError, ModelError, SolverError};
pub use hmc::{run_chains, Diagnostics, HmcConfig};
pub use smpc::{control_action, ContinuationState, ControlProblem, HorizonDecision, Scenario, SolveStatus};

pub use models::{FurutaParams, LinearFirstOrderParams, SystemModel};


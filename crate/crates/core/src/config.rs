//! Experiment description: plant, priors, sampler, controller, run length.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayes::{InitialStatePrior, ParamPrior, PriorSpec};
use crate::error::{ConfigError, SolverError};
use crate::hmc::HmcConfig;
use crate::models::{Furuta, FurutaParams, LinearFirstOrder, LinearFirstOrderParams, SystemModel};
use crate::smpc::{ContinuationState, ControlProblem};

pub const SCHEMA_VERSION: u32 = 1;

/// Plant family and the true parameters used to simulate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    LinearFirstOrder { truth: LinearFirstOrderParams },
    Furuta {
        #[serde(default = "FurutaParams::qube_servo2")]
        truth: FurutaParams,
    },
}

impl ModelConfig {
    pub fn build(&self) -> Box<dyn SystemModel> {
        match self {
            ModelConfig::LinearFirstOrder { .. } => Box::new(LinearFirstOrder),
            ModelConfig::Furuta { truth } => Box::new(Furuta::new(truth.clone())),
        }
    }

    /// Parameter vector of the simulated plant, in model order.
    pub fn truth_theta(&self) -> Vec<f64> {
        match self {
            ModelConfig::LinearFirstOrder { truth } => truth.theta(),
            ModelConfig::Furuta { truth } => truth.theta(),
        }
    }
}

/// Priors keyed by parameter name; unlisted parameters get `N(0, 10²)` on
/// their unconstrained coordinate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub params: BTreeMap<String, ParamPrior>,
    /// Defaults to `N(0, 1)` per component.
    pub initial_state: Option<InitialStatePrior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    pub control: ControlProblem,
    #[serde(default)]
    pub continuation: ContinuationState,
    /// Closed-loop length `T`.
    pub steps: usize,
    /// Joint samples `M` handed to the controller.
    pub scenarios: usize,
    /// True state at `t = 1`.
    pub initial_state: Vec<f64>,
    /// Input applied at `t = 1`.
    pub initial_input: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Steps at which to keep a horizon snapshot; empty keeps all.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn prior_spec(&self, model: &dyn SystemModel) -> Result<PriorSpec, ConfigError> {
        let mut spec = PriorSpec::weakly_informative(model);
        for (name, prior) in &self.priors.params {
            let i = model
                .param_index(name)
                .ok_or_else(|| ConfigError::Invalid(format!("prior for unknown parameter {name:?}")))?;
            spec.params[i] = *prior;
        }
        if let Some(p) = &self.priors.initial_state {
            spec.initial_state = p.clone();
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return invalid(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let model = self.model.build();
        let dims = model.dims();
        match &self.model {
            ModelConfig::Furuta { truth } => truth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ModelConfig::LinearFirstOrder { .. } => {}
        }
        model
            .validate_theta(&self.model.truth_theta())
            .map_err(|e| ConfigError::Invalid(format!("true parameters: {e}")))?;
        if self.steps == 0 {
            return invalid("steps must be at least 1".into());
        }
        if self.scenarios == 0 {
            return invalid("scenarios must be at least 1".into());
        }
        if self.scenarios > self.hmc.n_chains * self.hmc.n_keep {
            return invalid(format!(
                "{} scenarios requested but only {} draws are kept",
                self.scenarios,
                self.hmc.n_chains * self.hmc.n_keep
            ));
        }
        if self.initial_state.len() != dims.n_x || self.initial_state.iter().any(|v| !v.is_finite()) {
            return invalid(format!("initial_state must hold {} finite values", dims.n_x));
        }
        if self.initial_input.len() != dims.n_u || self.initial_input.iter().any(|v| !v.is_finite()) {
            return invalid(format!("initial_input must hold {} finite values", dims.n_u));
        }
        if self.control.n_x() != dims.n_x || self.control.n_u() != dims.n_u {
            return invalid("control problem dimensions do not match the model".into());
        }
        self.control.validate().map_err(|e| match e {
            SolverError::Infeasible(m) => ConfigError::Infeasible(m),
            e => ConfigError::Invalid(e.to_string()),
        })?;
        if !self.control.input_in_box(&self.initial_input) {
            return invalid("initial_input lies outside the input box".into());
        }
        self.continuation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hmc.validate(1).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.hmc.mass_diag.is_some() {
            return invalid("hmc.mass_diag cannot be preset for a closed-loop run (the dimension grows with t)".into());
        }
        let spec = self.prior_spec(model.as_ref())?;
        spec.validate(model.as_ref()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(&bad) = self.snapshot_steps.iter().find(|&&t| t == 0 || t > self.steps) {
            return invalid(format!("snapshot step {bad} outside 1..={}", self.steps));
        }
        Ok(())
    }

    pub fn keeps_snapshot(&self, t: usize) -> bool {
        self.snapshot_steps.is_empty() || self.snapshot_steps.contains(&t)
    }
}

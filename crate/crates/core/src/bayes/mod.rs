//! Posterior over `(x_{1:t}, θ, w̄)` given `(u_{1:t}, y_{1:t})`.
//!
//! The sampler works on a flat unconstrained vector `η`:
//!
//! ```text
//! η = [ x_1 … x_t | φ (free parameters, unconstrained) | ξ_0 … ξ_N ]
//! ```
//!
//! Positive parameters enter through their logarithm. Future disturbances
//! are stored standardised, `w̄_k = σ_w(θ) ⊙ ξ_k`, which removes the funnel
//! between the noise scale and the disturbances; the log-Jacobian of that
//! map cancels against `log p(w̄ | θ)`, leaving a standard normal on `ξ`.

pub mod kalman;
mod target;

pub use target::{log_target, PosteriorTarget};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, ModelError};
use crate::hmc::Diagnostics;
use crate::models::{ParamTransform, SystemModel};
use crate::smpc::Scenario;

/// Inputs and measurements observed so far, `u_{1:t}` and `y_{1:t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if inputs.len() != outputs.len() || inputs.is_empty() {
            return Err(ModelError::Dimension {
                what: "dataset length",
                expected: inputs.len().max(1),
                got: outputs.len(),
            });
        }
        if inputs.iter().chain(&outputs).flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { what: "dataset" });
        }
        Ok(Self { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The first `t` steps.
    pub fn prefix(&self, t: usize) -> Self {
        Self {
            inputs: self.inputs[..t].to_vec(),
            outputs: self.outputs[..t].to_vec(),
        }
    }
}

/// Prior on one model parameter. `Normal` acts on the unconstrained
/// coordinate (the logarithm for positive parameters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamPrior {
    Normal { mean: f64, std: f64 },
    /// Known parameter, excluded from sampling.
    Fixed { value: f64 },
}

impl ParamPrior {
    pub fn is_fixed(&self) -> bool {
        matches!(self, ParamPrior::Fixed { .. })
    }
}

/// Prior on the first state of the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStatePrior {
    Normal { mean: Vec<f64>, std: Vec<f64> },
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// One entry per model parameter, in model order.
    pub params: Vec<ParamPrior>,
    pub initial_state: InitialStatePrior,
}

impl PriorSpec {
    /// `N(0, 10²)` on every unconstrained parameter coordinate and
    /// `N(0, 1)` on each initial state component.
    pub fn weakly_informative(model: &dyn SystemModel) -> Self {
        let dims = model.dims();
        Self {
            params: vec![ParamPrior::Normal { mean: 0.0, std: 10.0 }; dims.n_theta],
            initial_state: InitialStatePrior::Normal {
                mean: vec![0.0; dims.n_x],
                std: vec![1.0; dims.n_x],
            },
        }
    }

    /// Same priors with every parameter fixed to `theta`.
    pub fn with_fixed_params(mut self, theta: &[f64]) -> Self {
        self.params = theta.iter().map(|&value| ParamPrior::Fixed { value }).collect();
        self
    }

    pub fn validate(&self, model: &dyn SystemModel) -> Result<(), ModelError> {
        let dims = model.dims();
        if self.params.len() != dims.n_theta {
            return Err(ModelError::Dimension {
                what: "parameter priors",
                expected: dims.n_theta,
                got: self.params.len(),
            });
        }
        for ((name, tr), p) in model.param_names().iter().zip(model.param_transforms()).zip(&self.params) {
            let ok = match p {
                ParamPrior::Normal { mean, std } => mean.is_finite() && std.is_finite() && *std > 0.0,
                ParamPrior::Fixed { value } => tr.is_valid(*value),
            };
            if !ok {
                return Err(ModelError::InvalidParameter {
                    name: name.to_string(),
                    reason: format!("invalid prior {p:?}"),
                });
            }
        }
        if let InitialStatePrior::Normal { mean, std } = &self.initial_state {
            if mean.len() != dims.n_x || std.len() != dims.n_x {
                return Err(ModelError::Dimension {
                    what: "initial state prior",
                    expected: dims.n_x,
                    got: mean.len().min(std.len()),
                });
            }
            if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
                return Err(ModelError::InvalidParameter {
                    name: "initial_state".into(),
                    reason: "std must be positive and finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// One joint draw: the state trajectory `x_{1:t}`, the full parameter
/// vector `θ` (constrained space, fixed entries included) and the future
/// disturbances `w̄` (`N + 1` vectors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub states: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub future_disturbances: Vec<Vec<f64>>,
}

impl PosteriorSample {
    /// `x_t`, the last entry of the trajectory.
    pub fn current_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is non-empty")
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            state: self.current_state().to_vec(),
            theta: self.theta.clone(),
            disturbances: self.future_disturbances.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.states
            .iter()
            .chain(&self.future_disturbances)
            .flatten()
            .chain(&self.theta)
            .all(|v| v.is_finite())
    }
}

/// Where each block of `η` lives, and how to move between `η` and a
/// [`PosteriorSample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub t: usize,
    pub n_x: usize,
    pub n_w: usize,
    pub horizon: usize,
    transforms: Vec<ParamTransform>,
    fixed: Vec<Option<f64>>,
    free: Vec<usize>,
    process_noise: Vec<usize>,
}

impl Layout {
    pub fn new(model: &dyn SystemModel, priors: &PriorSpec, t: usize, horizon: usize) -> Self {
        let dims = model.dims();
        let fixed: Vec<Option<f64>> = priors
            .params
            .iter()
            .map(|p| match p {
                ParamPrior::Fixed { value } => Some(*value),
                ParamPrior::Normal { .. } => None,
            })
            .collect();
        let free = (0..dims.n_theta).filter(|&i| fixed[i].is_none()).collect();
        Self {
            t,
            n_x: dims.n_x,
            n_w: dims.n_w(),
            horizon,
            transforms: model.param_transforms().to_vec(),
            fixed,
            free,
            process_noise: model.process_noise_params().to_vec(),
        }
    }

    /// Labels for every coordinate of `η`: `x[k][i]` with `k` from 1,
    /// `log_<name>` or `<name>` for free parameters, `xi[k][i]` with `k` from 0.
    pub fn coordinate_names(&self, param_names: &[&str]) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for k in 1..=self.t {
            names.extend((0..self.n_x).map(|i| format!("x[{k}][{i}]")));
        }
        for &j in &self.free {
            names.push(match self.transforms[j] {
                ParamTransform::Log => format!("log_{}", param_names[j]),
                ParamTransform::Identity => param_names[j].to_string(),
            });
        }
        for k in 0..=self.horizon {
            names.extend((0..self.n_w).map(|i| format!("xi[{k}][{i}]")));
        }
        names
    }

    /// `t·n_x + n_free + (N+1)·n_w`.
    pub fn dim(&self) -> usize {
        self.t * self.n_x + self.free.len() + (self.horizon + 1) * self.n_w
    }

    pub fn param_offset(&self) -> usize {
        self.t * self.n_x
    }

    pub fn noise_offset(&self) -> usize {
        self.param_offset() + self.free.len()
    }

    /// Indices into `θ` of the sampled parameters.
    pub fn free_params(&self) -> &[usize] {
        &self.free
    }

    pub fn transforms(&self) -> &[ParamTransform] {
        &self.transforms
    }

    /// Full constrained `θ` from `η`.
    pub fn theta(&self, eta: &[f64]) -> Vec<f64> {
        let mut theta: Vec<f64> = self.fixed.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let off = self.param_offset();
        for (k, &i) in self.free.iter().enumerate() {
            theta[i] = self.transforms[i].to_constrained(eta[off + k]);
        }
        theta
    }

    fn process_std(&self, theta: &[f64]) -> Vec<f64> {
        self.process_noise.iter().map(|&i| theta[i]).collect()
    }

    pub fn pack(&self, sample: &PosteriorSample) -> Result<Vec<f64>, EvalError> {
        let mismatch = |expected, got| EvalError::Dimension { expected, got };
        if sample.states.len() != self.t {
            return Err(mismatch(self.t, sample.states.len()));
        }
        if sample.future_disturbances.len() != self.horizon + 1 {
            return Err(mismatch(self.horizon + 1, sample.future_disturbances.len()));
        }
        if sample.theta.len() != self.transforms.len() {
            return Err(mismatch(self.transforms.len(), sample.theta.len()));
        }
        let mut eta = Vec::with_capacity(self.dim());
        for x in &sample.states {
            if x.len() != self.n_x {
                return Err(mismatch(self.n_x, x.len()));
            }
            eta.extend_from_slice(x);
        }
        for &i in &self.free {
            let v = sample.theta[i];
            if !self.transforms[i].is_valid(v) {
                return Err(ModelError::InvalidParameter {
                    name: format!("theta[{i}]"),
                    reason: format!("{v} outside domain"),
                }
                .into());
            }
            eta.push(self.transforms[i].to_unconstrained(v));
        }
        let theta = self.effective_theta(&sample.theta);
        let std = self.process_std(&theta);
        for w in &sample.future_disturbances {
            if w.len() != self.n_w {
                return Err(mismatch(self.n_w, w.len()));
            }
            eta.extend(w.iter().zip(&std).map(|(wi, s)| if *s > 0.0 { wi / s } else { 0.0 }));
        }
        Ok(eta)
    }

    pub fn unpack(&self, eta: &[f64]) -> Result<PosteriorSample, EvalError> {
        if eta.len() != self.dim() {
            return Err(EvalError::Dimension { expected: self.dim(), got: eta.len() });
        }
        let states = eta[..self.param_offset()].chunks(self.n_x).map(<[f64]>::to_vec).collect();
        let theta = self.theta(eta);
        let std = self.process_std(&theta);
        let future_disturbances = eta[self.noise_offset()..]
            .chunks(self.n_w)
            .map(|xi| xi.iter().zip(&std).map(|(z, s)| z * s).collect())
            .collect();
        Ok(PosteriorSample { states, theta, future_disturbances })
    }

    /// Replaces fixed entries so packing ignores whatever the sample holds there.
    fn effective_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.fixed)
            .map(|(v, f)| f.unwrap_or(*v))
            .collect()
    }
}

/// `N + 1` independent draws from the process-noise law at `θ`.
/// Negative scales clamp to zero.
pub fn sample_future_disturbances<R: Rng + ?Sized>(
    model: &dyn SystemModel,
    theta: &[f64],
    horizon: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let std = model.process_std(theta);
    (0..=horizon)
        .map(|_| {
            std.iter()
                .map(|s| {
                    let z: f64 = rng.sample(StandardNormal);
                    s.max(0.0) * z
                })
                .collect()
        })
        .collect()
}

/// Mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = if n > 1.0 {
            values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

/// Pooled posterior draws with sampler diagnostics.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// Chain-major: all draws of chain 0, then chain 1, ...
    pub samples: Vec<PosteriorSample>,
    pub n_chains: usize,
    pub diagnostics: Diagnostics,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `m` draws evenly spaced through the pooled set.
    pub fn thin(&self, m: usize) -> Self {
        let n = self.samples.len();
        let samples = if m == 0 || m >= n {
            self.samples.clone()
        } else {
            (0..m).map(|i| self.samples[i * n / m].clone()).collect()
        };
        Self { samples, n_chains: self.n_chains, diagnostics: self.diagnostics.clone() }
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.samples.iter().map(PosteriorSample::scenario).collect()
    }

    pub fn param_summary(&self) -> Vec<Summary> {
        let n_theta = self.samples[0].theta.len();
        (0..n_theta)
            .map(|i| Summary::of(self.samples.iter().map(move |s| s.theta[i])))
            .collect()
    }

    /// Summary of `x_t` per state component.
    pub fn state_summary(&self) -> Vec<Summary> {
        let n_x = self.samples[0].current_state().len();
        (0..n_x)
            .map(|i| Summary::of(self.samples.iter().map(move |s| s.current_state()[i])))
            .collect()
    }
}

/// Runs the sampler on `target` and unpacks the kept draws.
pub fn sample_posterior(
    target: &PosteriorTarget<'_>,
    inits: &[Vec<f64>],
    config: &crate::hmc::HmcConfig,
) -> Result<SampleSet, crate::error::HmcError> {
    let out = crate::hmc::run_chains(target, inits, config)?;
    let names = target.layout().coordinate_names(target.model().param_names());
    let samples = out
        .chains
        .iter()
        .flat_map(|c| c.draws.iter())
        .map(|eta| target.unpack(eta))
        .collect::<Result<Vec<_>, _>>()
        .map_err(crate::error::HmcError::Unpack)?;
    Ok(SampleSet { samples, n_chains: out.chains.len(), diagnostics: out.diagnostics.with_names(names) })
}

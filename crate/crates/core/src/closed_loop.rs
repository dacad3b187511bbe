//! The data-to-controller loop: measure, sample the posterior, solve the
//! horizon problem, apply the first input, repeat.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayes::{sample_posterior, Dataset, ParamPrior, PosteriorSample, PosteriorTarget, PriorSpec, SampleSet};
use crate::config::ExperimentConfig;
use crate::error::{HmcError, LoopError};
use crate::hmc::{Diagnostics, HmcConfig};
use crate::models::{SystemModel, TruthSimulator};
use crate::seed::{derive_seed, rng_for, stream};
use crate::smpc::{control_action, rollout, shift_warm_start, HorizonDecision, Scenario, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub sampling_seconds: f64,
    pub control_seconds: f64,
}

/// Everything recorded at one step of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub t: usize,
    pub true_state: Vec<f64>,
    pub measurement: Vec<f64>,
    /// `u_t`, applied before measuring.
    pub input: Vec<f64>,
    /// `u_{t+1}`, the first element of the optimised sequence.
    pub next_input: Vec<f64>,
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
    /// Posterior mean and std of `x_t`.
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub solver_status: SolveStatus,
    pub solver_iterations: usize,
    pub slack: f64,
    pub min_acceptance: f64,
    pub max_acceptance: f64,
    pub max_rhat: f64,
    pub divergences: usize,
    pub timing: PhaseTiming,
}

/// Quantiles reported in horizon snapshots.
pub const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// `k` in `x_{t+k}`, from 1 to `N + 1`.
    pub step: usize,
    /// `ū_{k−1}`, the input planned for time `t + k`.
    pub input: Vec<f64>,
    /// One `[q05, q25, q50, q75, q95]` per state component.
    pub quantiles: Vec<[f64; 5]>,
}

/// Fan-chart data: predicted state quantiles under the optimised inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSnapshot {
    pub t: usize,
    pub rows: Vec<HorizonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub diagnostics: Diagnostics,
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub records: Vec<ClosedLoopRecord>,
    pub snapshots: Vec<HorizonSnapshot>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Parameter names in the order of the record vectors.
    pub param_names: Vec<String>,
}

impl ClosedLoopRun {
    pub fn all_converged(&self) -> bool {
        self.records.iter().all(|r| r.solver_status == SolveStatus::Converged)
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

/// Predicted-state quantiles per horizon step under `decision`.
pub fn horizon_snapshot(
    t: usize,
    model: &dyn SystemModel,
    scenarios: &[Scenario],
    applied: &[f64],
    decision: &HorizonDecision,
) -> Result<HorizonSnapshot, LoopError> {
    let paths: Vec<Vec<Vec<f64>>> = scenarios
        .iter()
        .map(|s| rollout(model, &s.state, applied, &s.theta, &decision.inputs, &s.disturbances))
        .collect::<Result<_, _>>()
        .map_err(|e| LoopError::Control { t, source: e.into() })?;
    let n_x = model.dims().n_x;
    let rows = (0..decision.inputs.len())
        .map(|k| {
            let quantiles = (0..n_x)
                .map(|i| {
                    let mut v: Vec<f64> = paths.iter().map(|p| p[k][i]).collect();
                    QUANTILES.map(|q| quantile(&mut v, q))
                })
                .collect();
            HorizonRow { step: k + 1, input: decision.inputs[k].clone(), quantiles }
        })
        .collect();
    Ok(HorizonSnapshot { t, rows })
}

/// A sampler start drawn around the prior median, with states read off the
/// measurements and standard-normal future disturbances.
pub fn fresh_start(
    model: &dyn SystemModel,
    priors: &PriorSpec,
    data: &Dataset,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> PosteriorSample {
    let transforms = model.param_transforms();
    let theta: Vec<f64> = priors
        .params
        .iter()
        .zip(transforms)
        .map(|(p, tr)| match p {
            ParamPrior::Fixed { value } => *value,
            ParamPrior::Normal { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                tr.to_constrained(mean + 0.1 * std.min(1.0) * z)
            }
        })
        .collect();
    let states = data
        .outputs
        .iter()
        .map(|y| {
            model
                .state_from_measurement(y)
                .into_iter()
                .map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let std = model.process_std(&theta);
    let future_disturbances = (0..=horizon)
        .map(|_| std.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    PosteriorSample { states, theta, future_disturbances }
}

/// Extends a draw for `t − 1` data points to `t` by predicting the newest
/// state, and refreshes the future disturbances.
fn extend_draw(
    model: &dyn SystemModel,
    draw: &PosteriorSample,
    last_input: &[f64],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> PosteriorSample {
    let mut states = draw.states.clone();
    states.push(model.transition_mean(draw.current_state(), last_input, &draw.theta));
    let std = model.process_std(&draw.theta);
    let future_disturbances = (0..=horizon)
        .map(|_| std.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    PosteriorSample { states, theta: draw.theta.clone(), future_disturbances }
}

/// Per-chain starting points, packed for `target`. Each candidate that does
/// not have a finite log density is replaced by a fresh start.
pub fn initial_positions(
    target: &PosteriorTarget<'_>,
    candidates: Vec<Option<PosteriorSample>>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let horizon = target.layout().horizon;
    candidates
        .into_iter()
        .map(|cand| {
            let packed = cand
                .and_then(|s| target.pack(&s).ok())
                .filter(|eta| target.log_density_and_gradient(eta).is_ok());
            packed.unwrap_or_else(|| {
                for _ in 0..100 {
                    let s = fresh_start(target.model(), target.priors(), target.data(), horizon, rng);
                    if let Ok(eta) = target.pack(&s) {
                        if target.log_density_and_gradient(&eta).is_ok() {
                            return eta;
                        }
                    }
                }
                let s = fresh_start(target.model(), target.priors(), target.data(), horizon, rng);
                target.pack(&s).unwrap_or_else(|_| vec![0.0; target.dim()])
            })
        })
        .collect()
}

/// Runs the loop described by `config` for `config.steps` steps.
/// `on_step` is called after each step, e.g. for progress output.
pub fn run_closed_loop(
    config: &ExperimentConfig,
    mut on_step: impl FnMut(&ClosedLoopRecord),
) -> Result<ClosedLoopRun, LoopError> {
    config.validate()?;
    let model = config.model.build();
    let model = model.as_ref();
    let priors = config.prior_spec(model)?;
    let horizon = config.control.horizon;
    let master = config.seed;

    let mut truth = TruthSimulator::new(
        model,
        config.model.truth_theta(),
        config.initial_state.clone(),
        rng_for(master, stream::TRUTH, 0),
    );
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut outputs: Vec<Vec<f64>> = Vec::new();
    let mut u_t = config.initial_input.clone();
    let mut previous: Option<(SampleSet, HorizonDecision)> = None;

    let mut records = Vec::with_capacity(config.steps);
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::with_capacity(config.steps);

    for t in 1..=config.steps {
        let true_state = truth.state().to_vec();
        let y = truth.measure(&u_t);
        inputs.push(u_t.clone());
        outputs.push(y.clone());
        let data = Dataset::new(inputs.clone(), outputs.clone()).map_err(crate::error::EvalError::from)?;

        let started = Instant::now();
        let target = PosteriorTarget::new(model, priors.clone(), data, horizon)?;
        let mut init_rng = rng_for(master, stream::INIT, t as u64);
        let candidates: Vec<Option<PosteriorSample>> = (0..config.hmc.n_chains)
            .map(|c| {
                previous.as_ref().map(|(set, _)| {
                    let per_chain = set.len() / set.n_chains;
                    let last = &set.samples[(c + 1) * per_chain - 1];
                    extend_draw(model, last, &inputs[t - 2], horizon, &mut init_rng)
                })
            })
            .collect();
        let inits = initial_positions(&target, candidates, &mut init_rng);
        let hmc = HmcConfig { seed: derive_seed(master, stream::HMC, t as u64), ..config.hmc.clone() };
        let samples = sample_posterior(&target, &inits, &hmc).map_err(|source| LoopError::Sampling { t, source })?;
        let sampling_seconds = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let scenarios = samples.thin(config.scenarios).scenarios();
        let warm = previous.as_ref().map(|(_, d)| shift_warm_start(&d.inputs));
        let decision = control_action(model, &scenarios, &u_t, &config.control, &config.continuation, warm.as_deref())
            .map_err(|source| LoopError::Control { t, source })?;
        let control_seconds = started.elapsed().as_secs_f64();
        if decision.status != SolveStatus::Converged {
            log::warn!("t = {t}: solver finished with status {:?}", decision.status);
        }

        let next_input = config.control.clamp_input(decision.first_input());
        if next_input.as_slice() != decision.first_input() {
            log::warn!("t = {t}: optimised input {:?} clamped into the input box", decision.first_input());
        }

        if config.keeps_snapshot(t) {
            // The fan chart uses every kept draw, not only the thinned set
            // the controller saw, so its quantiles are less noisy.
            snapshots.push(horizon_snapshot(t, model, &samples.scenarios(), &u_t, &decision)?);
        }

        let params = samples.param_summary();
        let states = samples.state_summary();
        let d = &samples.diagnostics;
        let timing = PhaseTiming { sampling_seconds, control_seconds };
        let record = ClosedLoopRecord {
            t,
            true_state,
            measurement: y,
            input: u_t.clone(),
            next_input: next_input.clone(),
            param_mean: params.iter().map(|s| s.mean).collect(),
            param_std: params.iter().map(|s| s.std).collect(),
            state_mean: states.iter().map(|s| s.mean).collect(),
            state_std: states.iter().map(|s| s.std).collect(),
            solver_status: decision.status,
            solver_iterations: decision.iterations,
            slack: decision.slack,
            min_acceptance: d.chains.iter().map(|c| c.acceptance_rate).fold(f64::INFINITY, f64::min),
            max_acceptance: d.chains.iter().map(|c| c.acceptance_rate).fold(f64::NEG_INFINITY, f64::max),
            max_rhat: d.max_rhat,
            divergences: d.divergences,
            timing,
        };
        log::info!(
            "t = {t}: u = {:?} -> {:?}, solver {:?} in {} iterations, max R-hat {:.3}",
            record.input,
            record.next_input,
            record.solver_status,
            record.solver_iterations,
            record.max_rhat
        );
        on_step(&record);
        records.push(record);
        diagnostics.push(StepDiagnostics { t, diagnostics: d.clone(), timing });

        truth.advance(&u_t);
        u_t = next_input;
        previous = Some((samples, decision));
    }

    Ok(ClosedLoopRun {
        records,
        snapshots,
        diagnostics,
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
    })
}

/// Inputs for open-loop identification runs: uniform in the input box,
/// with a missing side replaced by the other side ∓ 2 (or ±1 when
/// unbounded).
pub fn excitation_inputs(config: &ExperimentConfig, t: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_for(config.seed, stream::INIT, 0);
    let p = &config.control;
    (0..t)
        .map(|_| {
            (0..p.n_u())
                .map(|i| {
                    let (lo, hi) = match (p.input_lower[i], p.input_upper[i]) {
                        (Some(l), Some(h)) => (l, h),
                        (Some(l), None) => (l, l + 2.0),
                        (None, Some(h)) => (h - 2.0, h),
                        (None, None) => (-1.0, 1.0),
                    };
                    rng.random_range(lo..hi)
                })
                .collect()
        })
        .collect()
}

/// Open-loop identification: simulate `t` steps under excitation inputs
/// and sample the posterior once.
pub fn identify(config: &ExperimentConfig, t: usize) -> Result<(Dataset, SampleSet), LoopError> {
    config.validate()?;
    let model = config.model.build();
    let model = model.as_ref();
    let inputs = excitation_inputs(config, t);
    let (_, outputs) =
        crate::models::simulate_truth(model, &config.model.truth_theta(), &config.initial_state, &inputs, config.seed);
    let data = Dataset::new(inputs, outputs).map_err(crate::error::EvalError::from)?;
    let priors = config.prior_spec(model)?;
    let target = PosteriorTarget::new(model, priors, data.clone(), config.control.horizon)?;
    let mut rng = rng_for(config.seed, stream::INIT, t as u64);
    let inits = initial_positions(&target, vec![None; config.hmc.n_chains], &mut rng);
    let hmc = HmcConfig { seed: derive_seed(config.seed, stream::HMC, t as u64), ..config.hmc.clone() };
    let samples = sample_posterior(&target, &inits, &hmc).map_err(|source: HmcError| LoopError::Sampling { t, source })?;
    Ok((data, samples))
}

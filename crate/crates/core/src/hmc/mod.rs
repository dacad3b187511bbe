//! Fixed-length Hamiltonian Monte Carlo with windowed warmup adaptation.

mod adapt;
pub mod diagnostics;

pub use adapt::{find_reasonable_step_size, DualAveraging, WarmupSchedule};
pub use diagnostics::{effective_sample_size, split_rhat, ChainDiagnostics, Diagnostics};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, HmcError};
use crate::seed::{self, rng_for};

/// A differentiable log density on `ℝ^d`. Implementations must be safe to
/// evaluate from several threads at once.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_gradient(&self, position: &[f64]) -> Result<(f64, Vec<f64>), EvalError>;
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density_and_gradient(&self, position: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        (**self).log_density_and_gradient(position)
    }
}

impl LogDensity for crate::bayes::PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.dim()
    }
    fn log_density_and_gradient(&self, position: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        self.log_density_and_gradient(position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    /// Initial leapfrog step, refined during warmup.
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Each trajectory uses `ε·(1 + j·U)`, `U ~ U(−1, 1)`, which breaks
    /// resonance between a fixed integration time and the target's periods.
    pub step_jitter: f64,
    /// Diagonal of the mass matrix; `None` starts from the identity.
    pub mass_diag: Option<Vec<f64>>,
    pub n_warmup: usize,
    pub n_keep: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    /// `|ΔH|` beyond which a transition counts as divergent.
    pub max_energy_error: f64,
    pub adapt_mass: bool,
    /// Base of the per-chain RNG streams. Closed-loop runs derive it from
    /// the master seed, so it is not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            n_leapfrog: 32,
            step_jitter: 0.5,
            mass_diag: None,
            n_warmup: 500,
            n_keep: 500,
            n_chains: 4,
            target_accept: 0.8,
            max_energy_error: 1000.0,
            adapt_mass: true,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self, dim: usize) -> Result<(), HmcError> {
        let bad = |m: &str| Err(HmcError::Config(m.to_string()));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.n_leapfrog == 0 {
            return bad("n_leapfrog must be at least 1");
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return bad("step_jitter must lie in [0, 1)");
        }
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if self.n_keep == 0 {
            return bad("n_keep must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if let Some(m) = &self.mass_diag {
            if m.len() != dim {
                return bad("mass_diag length does not match the target dimension");
            }
            if m.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad("mass_diag entries must be positive");
            }
        }
        Ok(())
    }
}

/// Position with its cached log density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub log_density: f64,
    pub gradient: Vec<f64>,
}

impl ChainState {
    pub fn new<T: LogDensity + ?Sized>(target: &T, position: Vec<f64>) -> Result<Self, EvalError> {
        let (log_density, gradient) = target.log_density_and_gradient(&position)?;
        Ok(Self { position, log_density, gradient })
    }
}

fn kinetic(momentum: &[f64], mass_diag: &[f64]) -> f64 {
    0.5 * momentum.iter().zip(mass_diag).map(|(p, m)| p * p / m).sum::<f64>()
}

/// Kick–drift–kick integration for `n_steps` steps. Returns the end state
/// and momentum; a non-finite intermediate aborts with an error.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    start: &ChainState,
    momentum: &[f64],
    step: f64,
    n_steps: usize,
    mass_diag: &[f64],
) -> Result<(ChainState, Vec<f64>), EvalError> {
    let mut q = start.position.clone();
    let mut p = momentum.to_vec();
    let mut grad = start.gradient.clone();
    let mut logp = start.log_density;
    for _ in 0..n_steps {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step * g;
        }
        for ((qi, pi), m) in q.iter_mut().zip(&p).zip(mass_diag) {
            *qi += step * pi / m;
        }
        (logp, grad) = target.log_density_and_gradient(&q)?;
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step * g;
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
    }
    Ok((ChainState { position: q, log_density: logp, gradient: grad }, p))
}

/// Outcome of one Metropolis-corrected trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub accepted: bool,
    pub accept_prob: f64,
    pub divergent: bool,
    /// `H(end) − H(start)`; infinite when the trajectory failed.
    pub energy_error: f64,
}

/// One HMC iteration. On rejection `state` is left unchanged.
pub fn hmc_iteration<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    state: &mut ChainState,
    step: f64,
    n_leapfrog: usize,
    mass_diag: &[f64],
    max_energy_error: f64,
    rng: &mut R,
) -> Transition {
    let rho: Vec<f64> = mass_diag
        .iter()
        .map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let h0 = -state.log_density + kinetic(&rho, mass_diag);
    let u: f64 = rng.random();
    match leapfrog(target, state, &rho, step, n_leapfrog, mass_diag) {
        Ok((proposal, rho_l)) => {
            let flipped: Vec<f64> = rho_l.iter().map(|p| -p).collect();
            let h1 = -proposal.log_density + kinetic(&flipped, mass_diag);
            let delta = h1 - h0;
            let accept_prob = if delta.is_nan() { 0.0 } else { (-delta).exp().min(1.0) };
            let accepted = u < accept_prob;
            if accepted {
                *state = proposal;
            }
            Transition {
                accepted,
                accept_prob,
                divergent: !(delta.abs() <= max_energy_error),
                energy_error: delta,
            }
        }
        Err(_) => Transition { accepted: false, accept_prob: 0.0, divergent: true, energy_error: f64::INFINITY },
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub step_size: f64,
    pub mass_diag: Vec<f64>,
    pub n_accepted: usize,
    pub mean_accept_prob: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
}

impl ChainOutput {
    /// Fraction of kept iterations whose proposal was accepted.
    pub fn acceptance_rate(&self) -> f64 {
        self.n_accepted as f64 / self.draws.len() as f64
    }
}

/// Runs warmup and sampling for one chain from `init` with the given RNG.
pub fn run_chain<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    init: Vec<f64>,
    config: &HmcConfig,
    rng: &mut R,
) -> Result<ChainOutput, EvalError> {
    let dim = init.len();
    let mut state = ChainState::new(target, init)?;
    let mut mass = config.mass_diag.clone().unwrap_or_else(|| vec![1.0; dim]);
    let mut step = config.step_size;
    let mut warmup_divergences = 0;

    if config.n_warmup > 0 {
        let schedule = WarmupSchedule::new(config.n_warmup);
        step = find_reasonable_step_size(target, &state, step, &mass, rng);
        let mut da = DualAveraging::new(step, config.target_accept);
        let mut window: Vec<Vec<f64>> = Vec::new();
        for i in 0..config.n_warmup {
            let eps = jittered(da.step_size(), config.step_jitter, rng);
            let tr = hmc_iteration(target, &mut state, eps, config.n_leapfrog, &mass, config.max_energy_error, rng);
            warmup_divergences += tr.divergent as usize;
            da.update(tr.accept_prob);
            if config.adapt_mass && schedule.in_slow_window(i) {
                window.push(state.position.clone());
                if schedule.is_window_end(i) {
                    mass = regularized_variance(&window).iter().map(|v| 1.0 / v).collect();
                    window.clear();
                    let restart = find_reasonable_step_size(target, &state, da.step_size(), &mass, rng);
                    da = DualAveraging::new(restart, config.target_accept);
                }
            }
        }
        step = da.final_step_size();
    }

    let mut draws = Vec::with_capacity(config.n_keep);
    let mut n_accepted = 0;
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    for _ in 0..config.n_keep {
        let eps = jittered(step, config.step_jitter, rng);
        let tr = hmc_iteration(target, &mut state, eps, config.n_leapfrog, &mass, config.max_energy_error, rng);
        n_accepted += tr.accepted as usize;
        accept_sum += tr.accept_prob;
        divergences += tr.divergent as usize;
        draws.push(state.position.clone());
    }
    Ok(ChainOutput {
        draws,
        step_size: step,
        mass_diag: mass,
        n_accepted,
        mean_accept_prob: accept_sum / config.n_keep as f64,
        divergences,
        warmup_divergences,
    })
}

fn jittered<R: Rng + ?Sized>(step: f64, jitter: f64, rng: &mut R) -> f64 {
    if jitter == 0.0 {
        step
    } else {
        step * (1.0 + jitter * rng.random_range(-1.0..1.0))
    }
}

/// Window variance shrunk toward `1e-3`; its reciprocal becomes the mass.
fn regularized_variance(window: &[Vec<f64>]) -> Vec<f64> {
    let n = window.len() as f64;
    let dim = window[0].len();
    (0..dim)
        .map(|j| {
            let mean = window.iter().map(|w| w[j]).sum::<f64>() / n;
            let var = window.iter().map(|w| (w[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
        })
        .collect()
}

/// Draws from every chain plus diagnostics.
#[derive(Debug, Clone)]
pub struct ChainsOutput {
    pub chains: Vec<ChainOutput>,
    pub diagnostics: Diagnostics,
}

/// The RNG for `chain`, independent of how chains are scheduled on threads.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    rng_for(seed, seed::stream::HMC, chain as u64)
}

/// Runs `inits.len()` chains in parallel on the current rayon pool.
pub fn run_chains<T: LogDensity + ?Sized>(
    target: &T,
    inits: &[Vec<f64>],
    config: &HmcConfig,
) -> Result<ChainsOutput, HmcError> {
    config.validate(target.dim())?;
    if inits.len() != config.n_chains {
        return Err(HmcError::Config(format!(
            "{} initial positions for {} chains",
            inits.len(),
            config.n_chains
        )));
    }
    if let Some(bad) = inits.iter().find(|q| q.len() != target.dim()) {
        return Err(HmcError::Config(format!(
            "initial position of length {} for a target of dimension {}",
            bad.len(),
            target.dim()
        )));
    }
    let chains = inits
        .par_iter()
        .enumerate()
        .map(|(c, init)| {
            let mut rng = chain_rng(config.seed, c);
            run_chain(target, init.clone(), config, &mut rng).map_err(|source| HmcError::BadInit { chain: c, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let diagnostics = Diagnostics::compute(&chains);
    for w in &diagnostics.warnings {
        log::warn!("{w}");
    }
    Ok(ChainsOutput { chains, diagnostics })
}

use rand::Rng;
use rand_distr::StandardNormal;

use super::{kinetic, leapfrog, ChainState, LogDensity};

/// Nesterov dual averaging of `log ε` toward a target acceptance statistic.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
    count: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(initial_step: f64, target_accept: f64) -> Self {
        Self {
            mu: (10.0 * initial_step).ln(),
            target: target_accept,
            h_bar: 0.0,
            log_step: initial_step.ln(),
            log_step_bar: 0.0,
            count: 0.0,
        }
    }

    pub fn update(&mut self, accept_prob: f64) {
        self.count += 1.0;
        let eta = 1.0 / (self.count + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_step = self.mu - self.count.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.count.powf(-Self::KAPPA);
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar;
    }

    /// Step to use for the next iteration.
    pub fn step_size(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step, used once adaptation ends.
    pub fn final_step_size(&self) -> f64 {
        if self.count == 0.0 {
            self.step_size()
        } else {
            self.log_step_bar.exp()
        }
    }
}

/// Stan-style warmup: an initial fast buffer, doubling slow windows that
/// estimate the mass matrix, and a terminal fast buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSchedule {
    /// `(start, end)` pairs, end exclusive.
    pub windows: Vec<(usize, usize)>,
}

impl WarmupSchedule {
    pub fn new(n_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if n_warmup < 20 {
            return Self { windows: Vec::new() };
        }
        if init + term + base > n_warmup {
            init = n_warmup * 15 / 100;
            term = n_warmup / 10;
            base = n_warmup - init - term;
        }
        let slow_end = n_warmup - term;
        let mut windows = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < slow_end {
            let mut end = start + size;
            if end + 2 * size > slow_end {
                end = slow_end;
            }
            windows.push((start, end));
            start = end;
            size *= 2;
        }
        Self { windows }
    }

    pub fn in_slow_window(&self, i: usize) -> bool {
        self.windows.iter().any(|&(s, e)| i >= s && i < e)
    }

    pub fn is_window_end(&self, i: usize) -> bool {
        self.windows.iter().any(|&(_, e)| i + 1 == e)
    }
}

/// Doubles or halves `step` until a single leapfrog step crosses an
/// acceptance probability of 0.8.
pub fn find_reasonable_step_size<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    state: &ChainState,
    step: f64,
    mass_diag: &[f64],
    rng: &mut R,
) -> f64 {
    let threshold = 0.8f64.ln();
    let log_accept = |eps: f64, rho: &[f64]| {
        let h0 = -state.log_density + kinetic(rho, mass_diag);
        match leapfrog(target, state, rho, eps, 1, mass_diag) {
            Ok((s, p)) => {
                let d = h0 - (-s.log_density + kinetic(&p, mass_diag));
                if d.is_nan() { f64::NEG_INFINITY } else { d }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let draw = |rng: &mut R| -> Vec<f64> {
        mass_diag.iter().map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut eps = step;
    let rho = draw(rng);
    let up = log_accept(eps, &rho) > threshold;
    for _ in 0..60 {
        let rho = draw(rng);
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        if !(1e-12..=1e3).contains(&next) {
            break;
        }
        let d = log_accept(next, &rho);
        if up && d <= threshold {
            break;
        }
        eps = next;
        if !up && d > threshold {
            break;
        }
    }
    eps
}

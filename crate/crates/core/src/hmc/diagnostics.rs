use serde::{Deserialize, Serialize};

use super::ChainOutput;

pub const RHAT_WARNING: f64 = 1.1;
pub const ACCEPTANCE_WARNING: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub acceptance_rate: f64,
    pub mean_accept_prob: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chains: Vec<ChainDiagnostics>,
    /// Coordinate labels, `eta[i]` unless a caller supplies better ones.
    pub names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub divergences: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn compute(chains: &[ChainOutput]) -> Self {
        let dim = chains.first().map_or(0, |c| c.draws.first().map_or(0, Vec::len));
        let mut rhat = Vec::with_capacity(dim);
        let mut ess = Vec::with_capacity(dim);
        for j in 0..dim {
            let series: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|d| d[j]).collect()).collect();
            rhat.push(split_rhat(&series));
            ess.push(effective_sample_size(&series));
        }
        let per_chain: Vec<ChainDiagnostics> = chains
            .iter()
            .enumerate()
            .map(|(i, c)| ChainDiagnostics {
                chain: i,
                acceptance_rate: c.acceptance_rate(),
                mean_accept_prob: c.mean_accept_prob,
                step_size: c.step_size,
                divergences: c.divergences,
                warmup_divergences: c.warmup_divergences,
            })
            .collect();
        let mut d = Self {
            names: (0..dim).map(|i| format!("eta[{i}]")).collect(),
            max_rhat: rhat.iter().copied().fold(f64::NAN, f64::max),
            min_ess: ess.iter().copied().fold(f64::NAN, f64::min),
            divergences: per_chain.iter().map(|c| c.divergences).sum(),
            chains: per_chain,
            rhat,
            ess,
            warnings: Vec::new(),
        };
        d.refresh_warnings();
        d
    }

    /// Replaces coordinate labels and rebuilds the warning messages.
    pub fn with_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.rhat.len() {
            self.names = names;
            self.refresh_warnings();
        }
        self
    }

    fn refresh_warnings(&mut self) {
        let mut w = Vec::new();
        for (name, r) in self.names.iter().zip(&self.rhat) {
            if *r > RHAT_WARNING || r.is_nan() {
                w.push(format!("split R-hat {r:.3} for {name} exceeds {RHAT_WARNING}"));
            }
        }
        for c in &self.chains {
            if c.acceptance_rate < ACCEPTANCE_WARNING {
                w.push(format!(
                    "chain {} acceptance rate {:.3} below {ACCEPTANCE_WARNING}",
                    c.chain, c.acceptance_rate
                ));
            }
        }
        if self.divergences > 0 {
            w.push(format!("{} divergent transitions after warmup", self.divergences));
        }
        self.warnings = w;
    }

    pub fn has_warnings(&self) -> bool {
        !self.warnings.is_empty()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [&c[..half], &c[c.len() - half..]]
        })
        .collect()
}

/// `(W, var⁺)` over equal-length chains.
fn variance_components(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b_over_n = if chains.len() > 1 { sample_var(&means) } else { 0.0 };
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Potential scale reduction computed on chains split in half.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    if halves.is_empty() || halves[0].len() < 2 {
        return f64::NAN;
    }
    let (w, var_plus) = variance_components(&halves);
    if w == 0.0 {
        return if var_plus == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence, on split chains.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    if halves.is_empty() || halves[0].len() < 4 {
        return f64::NAN;
    }
    let m = halves.len() as f64;
    let n = halves[0].len();
    let total = m * n as f64;
    let (w, var_plus) = variance_components(&halves);
    if w == 0.0 {
        return total;
    }
    let rho = |lag: usize| {
        let mean_acov = halves.iter().map(|c| autocovariance(c, lag)).sum::<f64>() / m;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        lag += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10());
    total / tau
}

//! Sampled stochastic MPC: Monte Carlo cost, sigmoid-relaxed chance
//! constraints, a log-barrier objective and a continuation Newton solver.

mod newton;
mod objective;
mod rollout;
mod solver;

pub use newton::{newton_direction, newton_inner, BarrierProblem, InnerStep, NewtonDirection};
pub use objective::{chance_estimate, mc_cost, sigmoid, sigmoid_derivatives, BarrierObjective, Evaluation};
pub use rollout::{rollout, rollout_with_sensitivities, Sensitivities};
pub use solver::{control_action, initial_inputs, shift_warm_start, TraceRow};

use serde::{Deserialize, Serialize};

use crate::error::SolverError;

/// A posterior draw reduced to what the controller needs: the current
/// state, the parameters and the `N + 1` future disturbances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub state: Vec<f64>,
    pub theta: Vec<f64>,
    pub disturbances: Vec<Vec<f64>>,
}

/// Bound on one state component, imposed in probability at every predicted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBound {
    pub state: usize,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

/// One chance constraint: a bound side on one state at one horizon step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceConstraint {
    pub state: usize,
    pub step: usize,
    pub side: Side,
    pub bound: f64,
}

impl ChanceConstraint {
    /// Positive when satisfied.
    pub fn margin(&self, x: f64) -> f64 {
        match self.side {
            Side::Upper => self.bound - x,
            Side::Lower => x - self.bound,
        }
    }

    /// `∂ margin / ∂ x`.
    pub fn sign(&self) -> f64 {
        match self.side {
            Side::Upper => -1.0,
            Side::Lower => 1.0,
        }
    }
}

/// The finite-horizon problem solved at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlProblem {
    /// `N`; the decision holds `N + 1` inputs.
    pub horizon: usize,
    /// Per-step state weight `Q_c`, `n_x × n_x`.
    pub state_weight: Vec<Vec<f64>>,
    /// Per-step input weight `R_c`, `n_u × n_u`.
    pub input_weight: Vec<Vec<f64>>,
    pub setpoint: Vec<f64>,
    pub input_lower: Vec<Option<f64>>,
    pub input_upper: Vec<Option<f64>>,
    #[serde(default)]
    pub state_bounds: Vec<StateBound>,
    /// Floor `δ` on the slack.
    pub delta: f64,
    /// Slack penalty weight `η`.
    pub slack_weight: f64,
    /// Slack offset `ε₀ ≤ 0`.
    pub slack_offset: f64,
}

impl ControlProblem {
    pub fn n_x(&self) -> usize {
        self.setpoint.len()
    }

    pub fn n_u(&self) -> usize {
        self.input_lower.len()
    }

    /// Length of `z = (ū, ε)`.
    pub fn n_z(&self) -> usize {
        (self.horizon + 1) * self.n_u() + 1
    }

    pub fn chance_constraints(&self) -> Vec<ChanceConstraint> {
        let mut out = Vec::new();
        for b in &self.state_bounds {
            for step in 0..=self.horizon {
                if let Some(bound) = b.lower {
                    out.push(ChanceConstraint { state: b.state, step, side: Side::Lower, bound });
                }
                if let Some(bound) = b.upper {
                    out.push(ChanceConstraint { state: b.state, step, side: Side::Upper, bound });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Problem(m));
        let (n_x, n_u) = (self.n_x(), self.n_u());
        if n_u == 0 || n_x == 0 {
            return bad("empty setpoint or input bounds".into());
        }
        if self.input_upper.len() != n_u {
            return bad(format!("input_upper has {} entries, expected {n_u}", self.input_upper.len()));
        }
        let square = |m: &Vec<Vec<f64>>, n: usize| m.len() == n && m.iter().all(|r| r.len() == n);
        if !square(&self.state_weight, n_x) || !square(&self.input_weight, n_u) {
            return bad("weight matrices must be square and match the state and input sizes".into());
        }
        for m in [&self.state_weight, &self.input_weight] {
            for i in 0..m.len() {
                for j in 0..m.len() {
                    if !m[i][j].is_finite() || (m[i][j] - m[j][i]).abs() > 1e-12 * m[i][j].abs().max(1.0) {
                        return bad("weight matrices must be finite and symmetric".into());
                    }
                }
                if m[i][i] < 0.0 {
                    return bad("weight matrices must be positive semidefinite".into());
                }
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0, 1)", self.delta));
        }
        if !(self.slack_weight >= 0.0) || !(self.slack_offset <= 0.0) {
            return bad("slack_weight must be non-negative and slack_offset non-positive".into());
        }
        for b in &self.state_bounds {
            if b.state >= n_x {
                return bad(format!("state bound on component {} of a {n_x}-state model", b.state));
            }
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l >= u {
                    return bad(format!("empty state interval [{l}, {u}]"));
                }
            }
        }
        for i in 0..n_u {
            if let (Some(l), Some(u)) = (self.input_lower[i], self.input_upper[i]) {
                if !(l < u) {
                    return Err(SolverError::Infeasible(format!("input box [{l}, {u}] has no interior")));
                }
            }
        }
        Ok(())
    }

    /// Clamps `u` into the closed input box.
    pub fn clamp_input(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| {
                let v = self.input_lower[i].map_or(v, |l| v.max(l));
                self.input_upper[i].map_or(v, |h| v.min(h))
            })
            .collect()
    }

    pub fn input_in_box(&self, u: &[f64]) -> bool {
        u.iter().enumerate().all(|(i, &v)| {
            self.input_lower[i].is_none_or(|l| v >= l) && self.input_upper[i].is_none_or(|h| v <= h)
        })
    }
}

/// Barrier continuation settings and the current `(μ, γ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationState {
    pub mu: f64,
    pub gamma: f64,
    pub mu_shrink: f64,
    pub gamma_shrink: f64,
    /// Inner Newton tolerance `τ₁` on `|pᵀg|`.
    pub tolerance: f64,
    pub mu_floor: f64,
    pub gamma_floor: f64,
    pub armijo: f64,
    pub max_iter: usize,
}

impl Default for ContinuationState {
    fn default() -> Self {
        Self {
            mu: 10.0,
            gamma: 1.0,
            mu_shrink: 0.25,
            gamma_shrink: 0.25,
            tolerance: 1e-4,
            mu_floor: 1e-6,
            gamma_floor: 1e-3,
            armijo: 1e-4,
            max_iter: 500,
        }
    }
}

impl ContinuationState {
    pub fn validate(&self) -> Result<(), SolverError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = pos(self.mu)
            && pos(self.gamma)
            && pos(self.mu_floor)
            && pos(self.gamma_floor)
            && pos(self.tolerance)
            && self.mu_shrink > 0.0
            && self.mu_shrink < 1.0
            && self.gamma_shrink > 0.0
            && self.gamma_shrink < 1.0
            && self.armijo > 0.0
            && self.armijo < 0.5
            && self.max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(SolverError::Problem(format!("invalid continuation settings {self:?}")))
        }
    }

    /// One continuation update: `μ ← max(η₁μ, τ₂)`, `γ ← max(η₂γ, τ₃)`.
    pub fn advance(&mut self) {
        self.mu = (self.mu_shrink * self.mu).max(self.mu_floor);
        self.gamma = (self.gamma_shrink * self.gamma).max(self.gamma_floor);
    }

    pub fn at_floors(&self) -> bool {
        self.mu <= self.mu_floor && self.gamma <= self.gamma_floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Stalled,
}

/// Solution `z = (ū, ε)` of one horizon problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonDecision {
    /// `N + 1` inputs.
    pub inputs: Vec<Vec<f64>>,
    pub slack: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub mu: f64,
    pub gamma: f64,
    /// `g_j^M` at the solution, one per chance constraint.
    pub chance: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl HorizonDecision {
    pub fn first_input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[cfg(test)]
mod tests;

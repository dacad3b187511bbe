use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::newton::BarrierProblem;
use super::rollout::{rollout, rollout_with_sensitivities};
use super::{ChanceConstraint, ControlProblem, Scenario};
use crate::error::{ModelError, SolverError};
use crate::models::SystemModel;

/// Scenarios per parallel work unit. Partial sums are combined in chunk
/// order, so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Logistic `1/(1 + exp(−z/γ))`, evaluated without overflow.
pub fn sigmoid(z: f64, gamma: f64) -> f64 {
    let s = z / gamma;
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `(σ, ∂σ/∂z, ∂²σ/∂z²)`.
pub fn sigmoid_derivatives(z: f64, gamma: f64) -> (f64, f64, f64) {
    let s = sigmoid(z, gamma);
    let d1 = s * sigmoid(-z, gamma) / gamma;
    let d2 = d1 * (1.0 - 2.0 * s) / gamma;
    (s, d1, d2)
}

/// `g = (1/M) Σ σ(c_i, γ)` over constraint margins.
pub fn chance_estimate(margins: &[f64], gamma: f64) -> f64 {
    margins.iter().map(|&c| sigmoid(c, gamma)).sum::<f64>() / margins.len() as f64
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn stage_cost(e: &[f64], q: &DMatrix<f64>) -> f64 {
    let mut c = 0.0;
    for i in 0..e.len() {
        for j in 0..e.len() {
            c += e[i] * q[(i, j)] * e[j];
        }
    }
    c
}

/// Sample-average quadratic cost `(1/M) Σ_i V(x_tⁱ, u_t, θⁱ, ū, w̄ⁱ)`.
pub fn mc_cost(
    model: &dyn SystemModel,
    scenarios: &[Scenario],
    applied: &[f64],
    inputs: &[Vec<f64>],
    problem: &ControlProblem,
) -> Result<f64, ModelError> {
    let q = to_matrix(&problem.state_weight);
    let r = to_matrix(&problem.input_weight);
    let mut total = 0.0;
    for s in scenarios {
        let xs = rollout(model, &s.state, applied, &s.theta, inputs, &s.disturbances)?;
        total += state_cost(&xs, &problem.setpoint, &q);
    }
    Ok(total / scenarios.len() as f64 + input_cost(inputs, &r))
}

fn state_cost(xs: &[Vec<f64>], setpoint: &[f64], q: &DMatrix<f64>) -> f64 {
    xs.iter()
        .map(|x| {
            let e: Vec<f64> = x.iter().zip(setpoint).map(|(a, b)| a - b).collect();
            stage_cost(&e, q)
        })
        .sum()
}

fn input_cost(inputs: &[Vec<f64>], r: &DMatrix<f64>) -> f64 {
    inputs.iter().map(|u| stage_cost(u, r)).sum()
}

/// Per-scenario sums of the cost and sigmoid terms.
#[derive(Debug, Clone)]
struct Terms {
    cost: f64,
    chance: Vec<f64>,
    cost_grad: Option<DVector<f64>>,
    cost_hess: Option<DMatrix<f64>>,
    chance_grad: Vec<DVector<f64>>,
    chance_hess: Vec<DMatrix<f64>>,
}

impl Terms {
    fn add(&mut self, other: &Terms) {
        self.cost += other.cost;
        for (a, b) in self.chance.iter_mut().zip(&other.chance) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.cost_grad, &other.cost_grad) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.cost_hess, &other.cost_hess) {
            *a += b;
        }
        for (a, b) in self.chance_grad.iter_mut().zip(&other.chance_grad) {
            *a += b;
        }
        for (a, b) in self.chance_hess.iter_mut().zip(&other.chance_hess) {
            *a += b;
        }
    }

    fn scale(&mut self, f: f64) {
        self.cost *= f;
        self.chance.iter_mut().for_each(|v| *v *= f);
        if let Some(g) = &mut self.cost_grad {
            *g *= f;
        }
        if let Some(h) = &mut self.cost_hess {
            *h *= f;
        }
        self.chance_grad.iter_mut().for_each(|g| *g *= f);
        self.chance_hess.iter_mut().for_each(|h| *h *= f);
    }
}

/// Everything the solver needs at one `z`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// Sample-average cost including the input term.
    pub cost: f64,
    /// `g_j^M`, one per chance constraint.
    pub chance: Vec<f64>,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// The log-barrier objective in `z = (ū, ε)` for fixed `(μ, γ)`.
pub struct BarrierObjective<'a> {
    model: &'a dyn SystemModel,
    scenarios: &'a [Scenario],
    applied: Vec<f64>,
    problem: &'a ControlProblem,
    constraints: Vec<ChanceConstraint>,
    state_weight: DMatrix<f64>,
    input_weight: DMatrix<f64>,
    pub mu: f64,
    pub gamma: f64,
}

impl<'a> BarrierObjective<'a> {
    pub fn new(
        model: &'a dyn SystemModel,
        scenarios: &'a [Scenario],
        applied: &[f64],
        problem: &'a ControlProblem,
        mu: f64,
        gamma: f64,
    ) -> Result<Self, SolverError> {
        problem.validate()?;
        if scenarios.is_empty() {
            return Err(SolverError::Problem("no scenarios".into()));
        }
        let dims = model.dims();
        if problem.n_x() != dims.n_x || problem.n_u() != dims.n_u || applied.len() != dims.n_u {
            return Err(SolverError::Problem("problem dimensions do not match the model".into()));
        }
        for s in scenarios {
            if s.state.len() != dims.n_x || s.theta.len() != dims.n_theta || s.disturbances.len() != problem.horizon + 1 {
                return Err(SolverError::Problem("scenario dimensions do not match the problem".into()));
            }
        }
        Ok(Self {
            model,
            scenarios,
            applied: applied.to_vec(),
            problem,
            constraints: problem.chance_constraints(),
            state_weight: to_matrix(&problem.state_weight),
            input_weight: to_matrix(&problem.input_weight),
            mu,
            gamma,
        })
    }

    pub fn problem(&self) -> &ControlProblem {
        self.problem
    }

    pub fn constraints(&self) -> &[ChanceConstraint] {
        &self.constraints
    }

    pub fn n_inputs(&self) -> usize {
        (self.problem.horizon + 1) * self.problem.n_u()
    }

    /// Splits `z` into `ū` (per step) and `ε`.
    pub fn split(&self, z: &[f64]) -> (Vec<Vec<f64>>, f64) {
        let n_u = self.problem.n_u();
        let n_v = self.n_inputs();
        (z[..n_v].chunks(n_u).map(<[f64]>::to_vec).collect(), z[n_v])
    }

    pub fn join(inputs: &[Vec<f64>], slack: f64) -> Vec<f64> {
        let mut z: Vec<f64> = inputs.iter().flatten().copied().collect();
        z.push(slack);
        z
    }

    fn scenario_terms(&self, s: &Scenario, inputs: &[Vec<f64>], derivatives: bool) -> Result<Terms, ModelError> {
        let n_c = self.constraints.len();
        if !derivatives {
            let xs = rollout(self.model, &s.state, &self.applied, &s.theta, inputs, &s.disturbances)?;
            let chance = self
                .constraints
                .iter()
                .map(|c| sigmoid(c.margin(xs[c.step][c.state]), self.gamma))
                .collect();
            return Ok(Terms {
                cost: state_cost(&xs, &self.problem.setpoint, &self.state_weight),
                chance,
                cost_grad: None,
                cost_hess: None,
                chance_grad: Vec::new(),
                chance_hess: Vec::new(),
            });
        }

        let sens =
            rollout_with_sensitivities(self.model, &s.state, &self.applied, &s.theta, inputs, &s.disturbances, true)?;
        let n_v = self.n_inputs();
        let q = &self.state_weight;
        let mut cost = 0.0;
        let mut grad = DVector::zeros(n_v);
        let mut hess = DMatrix::zeros(n_v, n_v);
        for (k, x) in sens.states.iter().enumerate() {
            let e = DVector::from_iterator(x.len(), x.iter().zip(&self.problem.setpoint).map(|(a, b)| a - b));
            let qe = q * &e;
            cost += e.dot(&qe);
            let sk = &sens.first[k];
            grad += sk.transpose() * &qe * 2.0;
            hess += sk.transpose() * q * sk * 2.0;
            if let Some(t) = &sens.second {
                for (a, ta) in t[k].iter().enumerate() {
                    if qe[a] != 0.0 {
                        hess += ta * (2.0 * qe[a]);
                    }
                }
            }
        }

        let mut chance = Vec::with_capacity(n_c);
        let mut chance_grad = Vec::with_capacity(n_c);
        let mut chance_hess = Vec::with_capacity(n_c);
        for c in &self.constraints {
            let (sig, d1, d2) = sigmoid_derivatives(c.margin(sens.states[c.step][c.state]), self.gamma);
            let dc: DVector<f64> = sens.first[c.step].row(c.state).transpose() * c.sign();
            let mut h = &dc * dc.transpose() * d2;
            if let Some(t) = &sens.second {
                h += &t[c.step][c.state] * (d1 * c.sign());
            }
            chance.push(sig);
            chance_grad.push(dc * d1);
            chance_hess.push(h);
        }
        Ok(Terms {
            cost,
            chance,
            cost_grad: Some(grad),
            cost_hess: Some(hess),
            chance_grad,
            chance_hess,
        })
    }

    fn averaged_terms(&self, inputs: &[Vec<f64>], derivatives: bool) -> Result<Terms, ModelError> {
        let partials: Vec<Terms> = self
            .scenarios
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc: Option<Terms> = None;
                for s in chunk {
                    let t = self.scenario_terms(s, inputs, derivatives)?;
                    match &mut acc {
                        Some(a) => a.add(&t),
                        None => acc = Some(t),
                    }
                }
                Ok(acc.expect("chunks are non-empty"))
            })
            .collect::<Result<_, ModelError>>()?;
        let mut iter = partials.into_iter();
        let mut total = iter.next().expect("at least one scenario");
        for p in iter {
            total.add(&p);
        }
        total.scale(1.0 / self.scenarios.len() as f64);
        Ok(total)
    }

    /// `g_j^M(ū, γ)` for every chance constraint.
    pub fn chance_levels(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        Ok(self.averaged_terms(inputs, false)?.chance)
    }

    /// Smallest slack keeping every relaxed constraint strictly feasible.
    pub fn feasible_slack(&self, inputs: &[Vec<f64>]) -> Result<f64, ModelError> {
        let g = self.chance_levels(inputs)?;
        let min_g = g.iter().copied().fold(f64::INFINITY, f64::min);
        let from_g = if min_g.is_finite() { 1.0 - min_g + 1e-6 } else { f64::NEG_INFINITY };
        Ok((self.problem.delta + 1e-6).max(from_g))
    }

    fn box_margins(&self, z: &[f64]) -> Vec<(usize, f64, f64)> {
        // (index into z, margin, ∂margin/∂z_index)
        let n_u = self.problem.n_u();
        let mut out = Vec::new();
        for (idx, &v) in z[..self.n_inputs()].iter().enumerate() {
            let i = idx % n_u;
            if let Some(l) = self.problem.input_lower[i] {
                out.push((idx, v - l, 1.0));
            }
            if let Some(h) = self.problem.input_upper[i] {
                out.push((idx, h - v, -1.0));
            }
        }
        out
    }

    fn check_domain(&self, z: &[f64]) -> Result<(), SolverError> {
        if z.len() != self.n_inputs() + 1 {
            return Err(SolverError::Problem(format!("z has length {}, expected {}", z.len(), self.n_inputs() + 1)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Overflow);
        }
        let slack = z[self.n_inputs()];
        if !(slack > self.problem.delta) {
            return Err(SolverError::Infeasible(format!("slack {slack} not above delta")));
        }
        if let Some((idx, m, _)) = self.box_margins(z).into_iter().find(|(_, m, _)| !(*m > 0.0)) {
            return Err(SolverError::Infeasible(format!("input {idx} on or outside its bound (margin {m})")));
        }
        Ok(())
    }

    fn assemble(&self, z: &[f64], terms: &Terms) -> Result<f64, SolverError> {
        let p = self.problem;
        let slack = z[self.n_inputs()];
        let (inputs, _) = self.split(z);
        let mut value = p.slack_weight * (slack - p.slack_offset).powi(2) + terms.cost
            + input_cost(&inputs, &self.input_weight)
            - self.mu * (slack - p.delta).ln();
        for (_, m, _) in self.box_margins(z) {
            value -= self.mu * m.ln();
        }
        for (j, g) in terms.chance.iter().enumerate() {
            let h = g - 1.0 + slack;
            if !(h > 0.0) {
                return Err(SolverError::Infeasible(format!("relaxed chance constraint {j} violated (g = {g})")));
            }
            value -= self.mu * h.ln();
        }
        if value.is_finite() {
            Ok(value)
        } else {
            Err(SolverError::Overflow)
        }
    }

    /// Value, gradient and Hessian at `z`.
    pub fn evaluate(&self, z: &[f64]) -> Result<Evaluation, SolverError> {
        self.check_domain(z)?;
        let (inputs, slack) = self.split(z);
        let terms = self.averaged_terms(&inputs, true)?;
        let value = self.assemble(z, &terms)?;
        let p = self.problem;
        let n_v = self.n_inputs();
        let n_u = p.n_u();
        let n_z = n_v + 1;
        let mu = self.mu;

        let mut g = DVector::zeros(n_z);
        let mut h = DMatrix::zeros(n_z, n_z);
        g.rows_mut(0, n_v).copy_from(terms.cost_grad.as_ref().expect("derivatives requested"));
        h.view_mut((0, 0), (n_v, n_v)).copy_from(terms.cost_hess.as_ref().expect("derivatives requested"));
        for k in 0..=p.horizon {
            let u = &inputs[k];
            for a in 0..n_u {
                for b in 0..n_u {
                    let r = self.input_weight[(a, b)];
                    g[k * n_u + a] += 2.0 * r * u[b];
                    h[(k * n_u + a, k * n_u + b)] += 2.0 * r;
                }
            }
        }

        let ds = slack - p.delta;
        g[n_v] += 2.0 * p.slack_weight * (slack - p.slack_offset) - mu / ds;
        h[(n_v, n_v)] += 2.0 * p.slack_weight + mu / (ds * ds);

        for (idx, m, dm) in self.box_margins(z) {
            g[idx] -= mu * dm / m;
            h[(idx, idx)] += mu / (m * m);
        }

        for j in 0..terms.chance.len() {
            let hj = terms.chance[j] - 1.0 + slack;
            let gj = &terms.chance_grad[j];
            let mut grad_h = DVector::zeros(n_z);
            grad_h.rows_mut(0, n_v).copy_from(gj);
            grad_h[n_v] = 1.0;
            g -= &grad_h * (mu / hj);
            h += &grad_h * grad_h.transpose() * (mu / (hj * hj));
            let mut block = h.view_mut((0, 0), (n_v, n_v));
            block -= &terms.chance_hess[j] * (mu / hj);
        }

        if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(SolverError::Overflow);
        }
        Ok(Evaluation { value, cost: terms.cost + input_cost(&inputs, &self.input_weight), chance: terms.chance, gradient: g, hessian: h })
    }
}

impl BarrierProblem for BarrierObjective<'_> {
    fn dim(&self) -> usize {
        self.n_inputs() + 1
    }

    fn value(&self, z: &[f64]) -> Result<f64, SolverError> {
        self.check_domain(z)?;
        let (inputs, _) = self.split(z);
        let terms = self.averaged_terms(&inputs, false)?;
        self.assemble(z, &terms)
    }

    fn derivatives(&self, z: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>), SolverError> {
        let e = self.evaluate(z)?;
        Ok((e.value, e.gradient, e.hessian))
    }

    fn max_step(&self, z: &[f64], p: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for (idx, m, dm) in self.box_margins(z) {
            let rate = dm * p[idx];
            if rate < 0.0 {
                alpha = alpha.min(-m / rate);
            }
        }
        let n_v = self.n_inputs();
        if p[n_v] < 0.0 {
            alpha = alpha.min((z[n_v] - self.problem.delta) / -p[n_v]);
        }
        alpha
    }
}

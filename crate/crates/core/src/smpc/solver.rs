use serde::{Deserialize, Serialize};

use super::newton::newton_inner;
use super::objective::BarrierObjective;
use super::{ContinuationState, ControlProblem, HorizonDecision, Scenario, SolveStatus};
use crate::error::SolverError;
use crate::models::SystemModel;

/// One accepted Newton iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub mu: f64,
    pub gamma: f64,
    pub cost: f64,
    /// `|pᵀg|` at the start of the iteration.
    pub decrement: f64,
    pub alpha: f64,
    pub slack: f64,
}

/// Cold start: box midpoint, one unit inside a one-sided bound, or zero.
pub fn initial_inputs(problem: &ControlProblem) -> Vec<Vec<f64>> {
    let u: Vec<f64> = (0..problem.n_u())
        .map(|i| match (problem.input_lower[i], problem.input_upper[i]) {
            (Some(l), Some(h)) => 0.5 * (l + h),
            (Some(l), None) => l + 1.0,
            (None, Some(h)) => h - 1.0,
            (None, None) => 0.0,
        })
        .collect();
    vec![u; problem.horizon + 1]
}

/// Drops the first input and repeats the last one.
pub fn shift_warm_start(previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = previous.iter().skip(1).cloned().collect();
    if let Some(last) = previous.last() {
        out.push(last.clone());
    }
    out
}

/// Moves inputs strictly inside the box.
fn interior(problem: &ControlProblem, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    inputs
        .iter()
        .map(|u| {
            u.iter()
                .enumerate()
                .map(|(i, &v)| match (problem.input_lower[i], problem.input_upper[i]) {
                    (Some(l), Some(h)) => {
                        let pad = 1e-3 * (h - l);
                        v.clamp(l + pad, h - pad)
                    }
                    (Some(l), None) => v.max(l + 1e-3 * l.abs().max(1.0)),
                    (None, Some(h)) => v.min(h - 1e-3 * h.abs().max(1.0)),
                    (None, None) => v,
                })
                .collect()
        })
        .collect()
}

/// Solves the horizon problem by barrier continuation: Newton on the
/// barrier objective at fixed `(μ, γ)` until `|pᵀg| < τ₁`, then shrink both
/// toward their floors and reset the slack to the smallest strictly
/// feasible value. `init` defaults to [`initial_inputs`].
pub fn control_action(
    model: &dyn SystemModel,
    scenarios: &[Scenario],
    applied: &[f64],
    problem: &ControlProblem,
    continuation: &ContinuationState,
    init: Option<&[Vec<f64>]>,
) -> Result<HorizonDecision, SolverError> {
    problem.validate()?;
    continuation.validate()?;
    let start = match init {
        Some(u) if u.len() == problem.horizon + 1 && u.iter().all(|v| v.len() == problem.n_u()) => u.to_vec(),
        Some(_) => return Err(SolverError::Problem("initial inputs have the wrong shape".into())),
        None => initial_inputs(problem),
    };
    let inputs = interior(problem, &start);

    let mut cont = continuation.clone();
    let mut objective = BarrierObjective::new(model, scenarios, applied, problem, cont.mu, cont.gamma)?;
    let slack = objective.feasible_slack(&inputs)?;
    let mut z = BarrierObjective::join(&inputs, slack);
    let n_v = objective.n_inputs();

    let mut trace = Vec::new();
    let mut iterations = 0;
    let status = 'outer: loop {
        let mut stalled = false;
        loop {
            if iterations >= cont.max_iter {
                break 'outer SolveStatus::MaxIterations;
            }
            match newton_inner(&objective, &z, cont.tolerance, cont.armijo) {
                Ok(step) => {
                    iterations += 1;
                    trace.push(TraceRow {
                        iteration: iterations,
                        mu: cont.mu,
                        gamma: cont.gamma,
                        cost: step.value,
                        decrement: step.slope.abs(),
                        alpha: step.alpha,
                        slack: step.z[n_v],
                    });
                    z = step.z;
                    if step.converged {
                        break;
                    }
                }
                Err(SolverError::Stall { halvings }) => {
                    log::debug!("line search stalled after {halvings} halvings at mu={} gamma={}", cont.mu, cont.gamma);
                    stalled = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if cont.at_floors() {
            break if stalled { SolveStatus::Stalled } else { SolveStatus::Converged };
        }
        cont.advance();
        objective.mu = cont.mu;
        objective.gamma = cont.gamma;
        let (u, _) = objective.split(&z);
        z[n_v] = objective.feasible_slack(&u)?;
    };

    let (inputs, slack) = objective.split(&z);
    let chance = objective.chance_levels(&inputs)?;
    Ok(HorizonDecision {
        inputs,
        slack,
        status,
        iterations,
        mu: cont.mu,
        gamma: cont.gamma,
        chance,
        trace,
    })
}

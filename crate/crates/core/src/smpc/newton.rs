use nalgebra::{DMatrix, DVector};

use crate::error::SolverError;

pub const MAX_HALVINGS: usize = 60;

/// A smooth objective with a barrier domain. `value` reports points
/// outside the domain as [`SolverError::Infeasible`].
pub trait BarrierProblem {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> Result<f64, SolverError>;
    fn derivatives(&self, z: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>), SolverError>;
    /// Largest `α` keeping the linear barrier arguments positive along `p`.
    fn max_step(&self, _z: &[f64], _p: &[f64]) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct NewtonDirection {
    pub direction: DVector<f64>,
    /// `pᵀg`.
    pub slope: f64,
    /// Shift added to the scaled Hessian, `0` for a plain Newton step.
    pub regularization: f64,
}

/// `p = −D(DHD + λI)⁻¹ Dg` with `D = diag(|H_ii|)^{-1/2}` and the smallest
/// `λ ∈ {0, 10⁻⁸·10^k}` that makes the shifted matrix factorable and `p` a
/// descent direction. Falls back to steepest descent if no shift works.
///
/// The Jacobi scaling matters for long horizons under unstable parameter
/// draws, where Hessian entries for early and late inputs differ by tens of
/// orders of magnitude and an unscaled Cholesky solve returns noise.
pub fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> NewtonDirection {
    let n = g.len();
    let d = DVector::from_fn(n, |i, _| {
        let v = h[(i, i)].abs();
        if v.is_finite() && v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }
    });
    let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * d[i] * d[j]);
    let gs = g.component_mul(&d);
    let mut lambda = 0.0;
    for attempt in 0..40 {
        let shifted = if lambda == 0.0 { hs.clone() } else { &hs + DMatrix::identity(n, n) * lambda };
        if let Some(chol) = shifted.cholesky() {
            let p = -chol.solve(&gs).component_mul(&d);
            let slope = p.dot(g);
            if p.iter().all(|v| v.is_finite()) && (slope < 0.0 || g.iter().all(|v| *v == 0.0)) {
                return NewtonDirection { direction: p, slope, regularization: lambda };
            }
        }
        lambda = if attempt == 0 { 1e-8 } else { lambda * 10.0 };
    }
    let p = -g;
    NewtonDirection { slope: p.dot(g), direction: p, regularization: f64::INFINITY }
}

#[derive(Debug, Clone)]
pub struct InnerStep {
    pub z: Vec<f64>,
    pub value: f64,
    /// `pᵀg` at the starting point.
    pub slope: f64,
    /// Accepted step length.
    pub alpha: f64,
    pub regularization: f64,
    /// `|pᵀg|` was below the tolerance at the starting point. The final
    /// Newton step is still taken when it decreases the objective.
    pub converged: bool,
}

/// One damped Newton iteration with fraction-to-the-boundary clipping and
/// Armijo backtracking.
pub fn newton_inner<P: BarrierProblem + ?Sized>(
    problem: &P,
    z: &[f64],
    tolerance: f64,
    armijo: f64,
) -> Result<InnerStep, SolverError> {
    let (value, g, h) = problem.derivatives(z)?;
    let dir = newton_direction(&g, &h);
    let converged = dir.slope.abs() < tolerance;
    let p = dir.direction.as_slice();
    let mut alpha = (0.99 * problem.max_step(z, p)).min(1.0);
    for _ in 0..MAX_HALVINGS {
        let trial: Vec<f64> = z.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
        match problem.value(&trial) {
            Ok(v) if v <= value + armijo * alpha * dir.slope => {
                return Ok(InnerStep {
                    z: trial,
                    value: v,
                    slope: dir.slope,
                    alpha,
                    regularization: dir.regularization,
                    converged,
                });
            }
            Ok(_) | Err(SolverError::Infeasible(_)) | Err(SolverError::Overflow) | Err(SolverError::Model(_)) => {
                alpha *= 0.5
            }
            Err(e) => return Err(e),
        }
    }
    if converged {
        // Already stationary to tolerance; rounding can defeat the Armijo test.
        return Ok(InnerStep {
            z: z.to_vec(),
            value,
            slope: dir.slope,
            alpha: 0.0,
            regularization: dir.regularization,
            converged,
        });
    }
    Err(SolverError::Stall { halvings: MAX_HALVINGS })
}

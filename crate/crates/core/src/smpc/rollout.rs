use nalgebra::DMatrix;

use crate::error::ModelError;
use crate::models::SystemModel;

fn check_finite(x: &[f64]) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { what: "predicted state" })
    }
}

fn check_lengths(inputs: &[Vec<f64>], disturbances: &[Vec<f64>]) -> Result<(), ModelError> {
    if inputs.len() != disturbances.len() || inputs.is_empty() {
        return Err(ModelError::Dimension {
            what: "horizon disturbances",
            expected: inputs.len(),
            got: disturbances.len(),
        });
    }
    Ok(())
}

/// Predicted states `x̄_0..x̄_N` (i.e. `x_{t+1}..x_{t+N+1}`):
/// `x̄_0 = f(x_t, u_t) + w̄_0`, `x̄_k = f(x̄_{k−1}, ū_{k−1}) + w̄_k`.
/// The last input `ū_N` does not move the state.
pub fn rollout(
    model: &dyn SystemModel,
    state: &[f64],
    applied: &[f64],
    theta: &[f64],
    inputs: &[Vec<f64>],
    disturbances: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, ModelError> {
    check_lengths(inputs, disturbances)?;
    let mut out = Vec::with_capacity(inputs.len());
    let mut x = model.transition(state, applied, theta, &disturbances[0]);
    check_finite(&x)?;
    out.push(x.clone());
    for k in 1..inputs.len() {
        x = model.transition(&x, &inputs[k - 1], theta, &disturbances[k]);
        check_finite(&x)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// A rollout with derivatives of every predicted state with respect to
/// the stacked inputs `v = (ū_0, …, ū_N)`.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub states: Vec<Vec<f64>>,
    /// `∂x̄_k/∂v`, `n_x × (N+1)n_u`.
    pub first: Vec<DMatrix<f64>>,
    /// `∂²x̄_k[a]/∂v²` per step and component; `None` for affine models.
    pub second: Option<Vec<Vec<DMatrix<f64>>>>,
}

pub fn rollout_with_sensitivities(
    model: &dyn SystemModel,
    state: &[f64],
    applied: &[f64],
    theta: &[f64],
    inputs: &[Vec<f64>],
    disturbances: &[Vec<f64>],
    second_order: bool,
) -> Result<Sensitivities, ModelError> {
    check_lengths(inputs, disturbances)?;
    let n_x = state.len();
    let n_u = applied.len();
    let n_v = inputs.len() * n_u;

    let mut x = model.transition(state, applied, theta, &disturbances[0]);
    check_finite(&x)?;
    let mut states = vec![x.clone()];
    let mut first = vec![DMatrix::zeros(n_x, n_v)];
    let mut second: Option<Vec<Vec<DMatrix<f64>>>> = None;
    if second_order {
        second = Some(vec![vec![DMatrix::zeros(n_v, n_v); n_x]]);
    }

    for k in 1..inputs.len() {
        let u = &inputs[k - 1];
        // D = ∂(x̄_{k−1}, ū_{k−1})/∂v
        let mut d = DMatrix::zeros(n_x + n_u, n_v);
        d.view_mut((0, 0), (n_x, n_v)).copy_from(&first[k - 1]);
        for j in 0..n_u {
            d[(n_x + j, (k - 1) * n_u + j)] = 1.0;
        }
        let curvature = if second.is_some() { model.transition_curvature(&x, u, theta) } else { None };
        let (value, jac) = match &curvature {
            Some(c) => (c.value.clone(), c.jacobian.clone()),
            None => {
                let lin = model.transition_jacobian(&x, u, theta);
                let mut j = DMatrix::zeros(n_x, n_x + n_u);
                j.view_mut((0, 0), (n_x, n_x)).copy_from(&lin.dx);
                j.view_mut((0, n_x), (n_x, n_u)).copy_from(&lin.du);
                (lin.value, j)
            }
        };
        first.push(&jac * &d);

        match (&mut second, &curvature) {
            (Some(t), Some(c)) => {
                let prev = &t[k - 1];
                let mut next = Vec::with_capacity(n_x);
                for a in 0..n_x {
                    let mut m = d.transpose() * &c.hessians[a] * &d;
                    for (b, tb) in prev.iter().enumerate() {
                        let jab = jac[(a, b)];
                        if jab != 0.0 {
                            m += tb * jab;
                        }
                    }
                    next.push(m);
                }
                t.push(next);
            }
            (Some(t), None) => {
                // Affine step: curvature only propagates through the state Jacobian.
                let prev = &t[k - 1];
                let next = (0..n_x)
                    .map(|a| {
                        let mut m = DMatrix::zeros(n_v, n_v);
                        for (b, tb) in prev.iter().enumerate() {
                            m += tb * jac[(a, b)];
                        }
                        m
                    })
                    .collect();
                t.push(next);
            }
            _ => {}
        }

        x = value.iter().zip(&disturbances[k]).map(|(f, w)| f + w).collect();
        check_finite(&x)?;
        states.push(x.clone());
    }

    // Affine models carry no curvature anywhere; drop the zero blocks.
    if second_order && model.transition_curvature(state, applied, theta).is_none() {
        second = None;
    }
    Ok(Sensitivities { states, first, second })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Furuta, FurutaParams, LinearFirstOrder, LinearFirstOrderParams};

    #[test]
    fn linear_free_response_is_geometric() {
        let m = LinearFirstOrder;
        let theta = LinearFirstOrderParams::nominal().theta();
        let n = 10;
        let xs = rollout(&m, &[1.0], &[0.0], &theta, &vec![vec![0.0]; n + 1], &vec![vec![0.0]; n + 1]).unwrap();
        for (k, x) in xs.iter().enumerate() {
            assert!((x[0] - 0.9f64.powi(k as i32 + 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_horizon_is_one_step() {
        let m = LinearFirstOrder;
        let p = LinearFirstOrderParams::nominal();
        let xs = rollout(&m, &[0.4], &[0.3], &p.theta(), &[vec![5.0]], &[vec![0.02]]).unwrap();
        assert_eq!(xs, vec![vec![crate::models::linear_step(0.4, 0.3, 0.02, &p)]]);
    }

    #[test]
    fn pendulum_at_rest_stays_put() {
        let m = Furuta::new(FurutaParams::qube_servo2());
        let theta = m.params().theta();
        let xs = rollout(&m, &[0.0; 4], &[0.0], &theta, &vec![vec![0.0]; 6], &vec![vec![0.0; 4]; 6]).unwrap();
        assert!(xs.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let m = LinearFirstOrder;
        let theta = LinearFirstOrderParams::nominal().theta();
        assert!(rollout(&m, &[0.0], &[0.0], &theta, &vec![vec![0.0]; 3], &vec![vec![0.0]; 2]).is_err());
    }

    #[test]
    fn furuta_sensitivities_match_finite_differences() {
        let m = Furuta::new(FurutaParams::qube_servo2());
        let theta = m.params().theta();
        let x0 = [0.1, 2.8, -0.3, 1.0];
        let inputs: Vec<Vec<f64>> = (0..5).map(|k| vec![(k as f64 - 2.0) * 1.5]).collect();
        let w = vec![vec![0.001, -0.002, 0.01, -0.01]; 5];
        let s = rollout_with_sensitivities(&m, &x0, &[0.5], &theta, &inputs, &w, true).unwrap();
        let second = s.second.as_ref().unwrap();
        let h = 1e-5;
        for v in 0..5 {
            let shifted = |d: f64| {
                let mut u = inputs.clone();
                u[v][0] += d;
                rollout_with_sensitivities(&m, &x0, &[0.5], &theta, &u, &w, false).unwrap()
            };
            let (p, mi) = (shifted(h), shifted(-h));
            for k in 0..5 {
                for a in 0..4 {
                    let fd = (p.states[k][a] - mi.states[k][a]) / (2.0 * h);
                    assert!((fd - s.first[k][(a, v)]).abs() < 1e-6 * fd.abs().max(1.0), "S k={k} a={a} v={v}");
                    for c in 0..5 {
                        let fd2 = (p.first[k][(a, c)] - mi.first[k][(a, c)]) / (2.0 * h);
                        let an = second[k][a][(v, c)];
                        assert!((fd2 - an).abs() < 1e-5 * fd2.abs().max(1.0), "T k={k} a={a} ({v},{c}): {an} vs {fd2}");
                    }
                }
            }
        }
    }

    #[test]
    fn linear_sensitivities_are_powers_of_a() {
        let m = LinearFirstOrder;
        let p = LinearFirstOrderParams::nominal();
        let s = rollout_with_sensitivities(&m, &[0.0], &[0.0], &p.theta(), &vec![vec![0.0]; 4], &vec![vec![0.0]; 4], true)
            .unwrap();
        assert!(s.second.is_none());
        // ∂x̄_k/∂ū_j = a^{k-1-j} b for j < k.
        for k in 0..4 {
            for j in 0..4 {
                let expect = if j < k { p.a.powi((k - 1 - j) as i32) * p.b } else { 0.0 };
                assert!((s.first[k][(0, j)] - expect).abs() < 1e-15);
            }
        }
    }
}

use super::{Dataset, InitialStatePrior, Layout, ParamPrior, PosteriorSample, PriorSpec};
use crate::error::EvalError;
use crate::models::SystemModel;
use crate::sum::CompensatedSum;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Unnormalised log posterior with its gradient in `η`.
pub struct PosteriorTarget<'a> {
    model: &'a dyn SystemModel,
    priors: PriorSpec,
    data: Dataset,
    layout: Layout,
}

impl<'a> PosteriorTarget<'a> {
    pub fn new(
        model: &'a dyn SystemModel,
        priors: PriorSpec,
        data: Dataset,
        horizon: usize,
    ) -> Result<Self, EvalError> {
        priors.validate(model)?;
        let dims = model.dims();
        for (u, y) in data.inputs.iter().zip(&data.outputs) {
            if u.len() != dims.n_u {
                return Err(EvalError::Dimension { expected: dims.n_u, got: u.len() });
            }
            if y.len() != dims.n_y {
                return Err(EvalError::Dimension { expected: dims.n_y, got: y.len() });
            }
        }
        let layout = Layout::new(model, &priors, data.len(), horizon);
        Ok(Self { model, priors, data, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn model(&self) -> &dyn SystemModel {
        self.model
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn unpack(&self, eta: &[f64]) -> Result<PosteriorSample, EvalError> {
        self.layout.unpack(eta)
    }

    pub fn pack(&self, sample: &PosteriorSample) -> Result<Vec<f64>, EvalError> {
        self.layout.pack(sample)
    }

    /// `log p̃(η)` and `∇ log p̃(η)`.
    pub fn log_density_and_gradient(&self, eta: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        self.evaluate(eta, false)
    }

    fn evaluate(&self, eta: &[f64], reversed: bool) -> Result<(f64, Vec<f64>), EvalError> {
        let l = &self.layout;
        if eta.len() != l.dim() {
            return Err(EvalError::Dimension { expected: l.dim(), got: eta.len() });
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        let n_x = l.n_x;
        let theta = l.theta(eta);
        let mut acc = CompensatedSum::default();
        let mut grad = vec![0.0; eta.len()];
        let mut g_theta = vec![0.0; theta.len()];
        let state = |k: usize| &eta[k * n_x..(k + 1) * n_x];

        // Parameters: prior on the unconstrained coordinate plus the transform Jacobian.
        let p_off = l.param_offset();
        for (k, &i) in l.free_params().iter().enumerate() {
            let phi = eta[p_off + k];
            if let ParamPrior::Normal { mean, std } = self.priors.params[i] {
                let z = (phi - mean) / std;
                acc.add(-0.5 * z * z - std.ln() - HALF_LN_2PI);
                grad[p_off + k] -= z / std;
            }
            let tr = l.transforms()[i];
            acc.add(tr.log_jacobian(phi));
            grad[p_off + k] += tr.log_jacobian_grad();
        }

        if let InitialStatePrior::Normal { mean, std } = &self.priors.initial_state {
            for i in 0..n_x {
                let z = (eta[i] - mean[i]) / std[i];
                acc.add(-0.5 * z * z - std[i].ln() - HALF_LN_2PI);
                grad[i] -= z / std[i];
            }
        }

        let t = l.t;
        let q_idx = self.model.process_noise_params();
        let r_idx = self.model.measurement_noise_params();
        let order: Box<dyn Iterator<Item = usize>> =
            if reversed { Box::new((0..t).rev()) } else { Box::new(0..t) };
        for k in order {
            let u = &self.data.inputs[k];
            let x = state(k);

            let meas = self.model.measurement_jacobian(x, u, &theta);
            gaussian_residual_terms(
                &self.data.outputs[k],
                &meas.value,
                r_idx,
                &theta,
                &mut acc,
                |i, c| {
                    for j in 0..n_x {
                        grad[k * n_x + j] += c * meas.dx[(i, j)];
                    }
                },
                &mut g_theta,
                &meas.dtheta,
            )?;

            if k + 1 < t {
                let tr = self.model.transition_jacobian(x, u, &theta);
                let next = state(k + 1);
                for i in 0..n_x {
                    let q = theta[q_idx[i]];
                    grad[(k + 1) * n_x + i] -= (next[i] - tr.value[i]) / (q * q);
                }
                gaussian_residual_terms(
                    next,
                    &tr.value,
                    q_idx,
                    &theta,
                    &mut acc,
                    |i, c| {
                        for j in 0..n_x {
                            grad[k * n_x + j] += c * tr.dx[(i, j)];
                        }
                    },
                    &mut g_theta,
                    &tr.dtheta,
                )?;
            }
        }

        let n_off = l.noise_offset();
        for xi in &eta[n_off..] {
            acc.add(-0.5 * xi * xi - HALF_LN_2PI);
        }
        for (g, xi) in grad[n_off..].iter_mut().zip(&eta[n_off..]) {
            *g -= xi;
        }

        for (k, &i) in l.free_params().iter().enumerate() {
            grad[p_off + k] += g_theta[i] * l.transforms()[i].derivative(eta[p_off + k]);
        }

        let value = acc.value();
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok((value, grad))
    }

    #[cfg(test)]
    pub(crate) fn evaluate_reversed(&self, eta: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        self.evaluate(eta, true)
    }
}

/// Adds `Σ_i log N(obs_i; mean_i, σ_i²)` and its gradient with respect to
/// `θ`. `on_mean(i, c)` receives `c = ∂/∂mean_i` so the caller can chain it
/// through whatever the mean depends on.
#[allow(clippy::too_many_arguments)]
fn gaussian_residual_terms(
    obs: &[f64],
    mean: &[f64],
    std_idx: &[usize],
    theta: &[f64],
    acc: &mut CompensatedSum,
    mut on_mean: impl FnMut(usize, f64),
    g_theta: &mut [f64],
    dmean_dtheta: &nalgebra::DMatrix<f64>,
) -> Result<(), EvalError> {
    for i in 0..obs.len() {
        let s = theta[std_idx[i]];
        if !(s > 0.0) {
            return Err(EvalError::NonFinite);
        }
        let z = (obs[i] - mean[i]) / s;
        acc.add(-0.5 * z * z - s.ln() - HALF_LN_2PI);
        let c = z / s;
        on_mean(i, c);
        for j in 0..theta.len() {
            g_theta[j] += c * dmean_dtheta[(i, j)];
        }
        g_theta[std_idx[i]] += (z * z - 1.0) / s;
    }
    Ok(())
}

/// `log p̃(η)` alone.
pub fn log_target(target: &PosteriorTarget<'_>, eta: &[f64]) -> Result<f64, EvalError> {
    target.log_density_and_gradient(eta).map(|(v, _)| v)
}

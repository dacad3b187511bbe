//! State-space models `x' = f(x, u, θ) + w`, `y = h(x, u, θ) + e` with
//! independent Gaussian process and measurement noise whose standard
//! deviations are themselves entries of `θ`.
//!
//! Two plants are provided: a scalar first-order linear system and the
//! Furuta (rotary inverted) pendulum discretised with RK4.

mod furuta;
mod linear;
mod rk4;
mod truth;

pub use furuta::{furuta_continuous_dynamics, mass_matrix, total_energy, Furuta, FurutaParams};
pub use linear::{linear_step, LinearFirstOrder, LinearFirstOrderParams};
pub use rk4::rk4_step;
pub use truth::{simulate_truth, TruthSimulator};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_theta: usize,
}

impl Dims {
    /// Process noise is additive on the state, one component per state.
    pub fn n_w(&self) -> usize {
        self.n_x
    }
}

/// Bijection between a parameter's constrained value and the unconstrained
/// coordinate the sampler moves in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTransform {
    Identity,
    /// Positive parameter, sampled as its logarithm.
    Log,
}

impl ParamTransform {
    pub fn to_unconstrained(self, value: f64) -> f64 {
        match self {
            ParamTransform::Identity => value,
            ParamTransform::Log => value.ln(),
        }
    }

    pub fn to_constrained(self, coord: f64) -> f64 {
        match self {
            ParamTransform::Identity => coord,
            ParamTransform::Log => coord.exp(),
        }
    }

    /// `d value / d coord`.
    pub fn derivative(self, coord: f64) -> f64 {
        match self {
            ParamTransform::Identity => 1.0,
            ParamTransform::Log => coord.exp(),
        }
    }

    /// `log |d value / d coord|`.
    pub fn log_jacobian(self, coord: f64) -> f64 {
        match self {
            ParamTransform::Identity => 0.0,
            ParamTransform::Log => coord,
        }
    }

    /// Derivative of [`Self::log_jacobian`] with respect to the coordinate.
    pub fn log_jacobian_grad(self) -> f64 {
        match self {
            ParamTransform::Identity => 0.0,
            ParamTransform::Log => 1.0,
        }
    }

    pub fn is_valid(self, value: f64) -> bool {
        match self {
            ParamTransform::Identity => value.is_finite(),
            ParamTransform::Log => value.is_finite() && value > 0.0,
        }
    }
}

/// Value of a map together with its first derivatives.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub value: Vec<f64>,
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub dtheta: DMatrix<f64>,
}

/// Second-order expansion of the noise-free transition in the joint
/// variable `(x, u)` at fixed parameters.
#[derive(Debug, Clone)]
pub struct Curvature {
    pub value: Vec<f64>,
    /// `n_x × (n_x + n_u)`.
    pub jacobian: DMatrix<f64>,
    /// One `(n_x + n_u)²` Hessian per output component.
    pub hessians: Vec<DMatrix<f64>>,
}

/// A nonlinear state-space model with additive Gaussian noise.
///
/// Implementors supply the noise-free maps and their derivatives; the
/// noisy transition and measurement are provided on top of those.
pub trait SystemModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn dims(&self) -> Dims;
    fn param_names(&self) -> &[&'static str];
    fn param_transforms(&self) -> &[ParamTransform];
    /// Index into `θ` of the standard deviation of each process-noise component.
    fn process_noise_params(&self) -> &[usize];
    /// Index into `θ` of the standard deviation of each measurement-noise component.
    fn measurement_noise_params(&self) -> &[usize];

    /// `f(x, u, θ, 0)`.
    fn transition_mean(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64>;
    /// `h(x, u, θ, 0)`.
    fn measurement_mean(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64>;
    fn transition_jacobian(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Linearization;
    fn measurement_jacobian(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Linearization;
    /// Second derivatives of the transition in `(x, u)`. `None` when the
    /// transition is affine in `(x, u)`.
    fn transition_curvature(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Option<Curvature>;

    /// A rough state consistent with measurement `y`, used to start samplers.
    fn state_from_measurement(&self, y: &[f64]) -> Vec<f64> {
        let _ = y;
        vec![0.0; self.dims().n_x]
    }

    fn transition(&self, x: &[f64], u: &[f64], theta: &[f64], w: &[f64]) -> Vec<f64> {
        let mut next = self.transition_mean(x, u, theta);
        for (n, wi) in next.iter_mut().zip(w) {
            *n += wi;
        }
        next
    }

    fn measurement(&self, x: &[f64], u: &[f64], theta: &[f64], e: &[f64]) -> Vec<f64> {
        let mut y = self.measurement_mean(x, u, theta);
        for (yi, ei) in y.iter_mut().zip(e) {
            *yi += ei;
        }
        y
    }

    fn process_std(&self, theta: &[f64]) -> Vec<f64> {
        self.process_noise_params().iter().map(|&i| theta[i]).collect()
    }

    fn measurement_std(&self, theta: &[f64]) -> Vec<f64> {
        self.measurement_noise_params().iter().map(|&i| theta[i]).collect()
    }

    fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| *n == name)
    }

    /// Checks `θ` against the transforms' domains.
    fn validate_theta(&self, theta: &[f64]) -> Result<(), ModelError> {
        let dims = self.dims();
        if theta.len() != dims.n_theta {
            return Err(ModelError::Dimension {
                what: "theta",
                expected: dims.n_theta,
                got: theta.len(),
            });
        }
        for ((name, tr), v) in self.param_names().iter().zip(self.param_transforms()).zip(theta) {
            if !tr.is_valid(*v) {
                return Err(ModelError::InvalidParameter {
                    name: name.to_string(),
                    reason: format!("value {v} outside the parameter domain"),
                });
            }
        }
        Ok(())
    }
}

/// Maps a full parameter vector to unconstrained coordinates.
pub fn theta_to_unconstrained(model: &dyn SystemModel, theta: &[f64]) -> Vec<f64> {
    model
        .param_transforms()
        .iter()
        .zip(theta)
        .map(|(t, v)| t.to_unconstrained(*v))
        .collect()
}

pub fn theta_from_unconstrained(model: &dyn SystemModel, coords: &[f64]) -> Vec<f64> {
    model
        .param_transforms()
        .iter()
        .zip(coords)
        .map(|(t, c)| t.to_constrained(*c))
        .collect()
}

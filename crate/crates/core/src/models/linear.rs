use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Curvature, Dims, Linearization, ParamTransform, SystemModel};

/// `x' = a x + b u + w`, `y = x + e` with `w ~ N(0, q²)`, `e ~ N(0, r²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFirstOrderParams {
    pub a: f64,
    pub b: f64,
    /// Process-noise standard deviation.
    pub q: f64,
    /// Measurement-noise standard deviation.
    pub r: f64,
}

impl LinearFirstOrderParams {
    pub const fn nominal() -> Self {
        Self { a: 0.9, b: 0.1, q: 0.05, r: 0.01 }
    }

    pub fn theta(&self) -> Vec<f64> {
        vec![self.a, self.b, self.q, self.r]
    }

    pub fn from_theta(theta: &[f64]) -> Self {
        Self { a: theta[0], b: theta[1], q: theta[2], r: theta[3] }
    }
}

pub fn linear_step(x: f64, u: f64, w: f64, p: &LinearFirstOrderParams) -> f64 {
    p.a * x + p.b * u + w
}

/// The scalar first-order plant. Parameters are `θ = [a, b, q, r]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearFirstOrder;

const NAMES: [&str; 4] = ["a", "b", "q", "r"];
const TRANSFORMS: [ParamTransform; 4] = [
    ParamTransform::Identity,
    ParamTransform::Identity,
    ParamTransform::Log,
    ParamTransform::Log,
];

impl SystemModel for LinearFirstOrder {
    fn name(&self) -> &'static str {
        "linear_first_order"
    }

    fn dims(&self) -> Dims {
        Dims { n_x: 1, n_u: 1, n_y: 1, n_theta: 4 }
    }

    fn param_names(&self) -> &[&'static str] {
        &NAMES
    }

    fn param_transforms(&self) -> &[ParamTransform] {
        &TRANSFORMS
    }

    fn process_noise_params(&self) -> &[usize] {
        &[2]
    }

    fn measurement_noise_params(&self) -> &[usize] {
        &[3]
    }

    fn transition_mean(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64> {
        vec![theta[0] * x[0] + theta[1] * u[0]]
    }

    fn measurement_mean(&self, x: &[f64], _u: &[f64], _theta: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }

    fn transition_jacobian(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Linearization {
        Linearization {
            value: self.transition_mean(x, u, theta),
            dx: DMatrix::from_element(1, 1, theta[0]),
            du: DMatrix::from_element(1, 1, theta[1]),
            dtheta: DMatrix::from_row_slice(1, 4, &[x[0], u[0], 0.0, 0.0]),
        }
    }

    fn measurement_jacobian(&self, x: &[f64], _u: &[f64], _theta: &[f64]) -> Linearization {
        Linearization {
            value: vec![x[0]],
            dx: DMatrix::from_element(1, 1, 1.0),
            du: DMatrix::zeros(1, 1),
            dtheta: DMatrix::zeros(1, 4),
        }
    }

    fn state_from_measurement(&self, y: &[f64]) -> Vec<f64> {
        vec![y[0]]
    }

    fn transition_curvature(&self, _x: &[f64], _u: &[f64], _theta: &[f64]) -> Option<Curvature> {
        None
    }
}

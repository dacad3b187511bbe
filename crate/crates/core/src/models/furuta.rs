//! Furuta pendulum: arm angle `ϑ`, pendulum angle `α`, motor voltage `V_m`.
//!
//! State `x = [ϑ, α, ϑ̇, α̇]`. Angle convention: `α = 0` hangs down, `α = π`
//! is the upright equilibrium; gravity torque `-½ m_p L_p g sin α` restores
//! toward `α = 0`. The discrete transition is one RK4 step of length `h`
//! with the voltage held, followed by additive process noise.

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, SVector};
use num_dual::{DualNum, DualSVec64};
use serde::{Deserialize, Serialize};

use super::{rk4_step, Curvature, Dims, Linearization, ParamTransform, SystemModel};
use crate::error::ModelError;

/// Physical constants of the plant plus the noise scales (the diagonal of
/// `Σ^{1/2}`, process then measurement) and the sampling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FurutaParams {
    /// Pendulum mass (kg).
    pub m_p: f64,
    /// Arm length (m).
    #[serde(rename = "L_r")]
    pub l_r: f64,
    /// Pendulum length (m).
    #[serde(rename = "L_p")]
    pub l_p: f64,
    /// Arm inertia (kg m²).
    #[serde(rename = "J_r")]
    pub j_r: f64,
    /// Pendulum inertia about its centre of mass (kg m²).
    #[serde(rename = "J_p")]
    pub j_p: f64,
    /// Motor resistance (Ω).
    #[serde(rename = "R_m")]
    pub r_m: f64,
    /// Motor back-EMF / torque constant (V s / rad).
    pub k_m: f64,
    /// Arm damping (N m s / rad).
    #[serde(rename = "D_r")]
    pub d_r: f64,
    /// Pendulum damping (N m s / rad).
    #[serde(rename = "D_p")]
    pub d_p: f64,
    pub g: f64,
    /// Process-noise std for `[ϑ, α, ϑ̇, α̇]`.
    pub process_std: [f64; 4],
    /// Measurement-noise std for `[ϑ, α, current]`.
    pub measurement_std: [f64; 3],
    /// Sampling interval (s).
    pub h: f64,
}

const CANONICAL: &str = include_str!("../../../../configs/qube_servo2.json");

impl FurutaParams {
    /// QUBE-Servo 2 values, parsed from the canonical parameter file.
    pub fn qube_servo2() -> Self {
        serde_json::from_str(CANONICAL).expect("canonical parameter file is valid")
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::InvalidParameter {
            name: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let p: Self = serde_json::from_str(&text).map_err(|e| ModelError::InvalidParameter {
            name: path.display().to_string(),
            reason: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let scalars = [
            ("m_p", self.m_p),
            ("L_r", self.l_r),
            ("L_p", self.l_p),
            ("J_r", self.j_r),
            ("J_p", self.j_p),
            ("R_m", self.r_m),
            ("k_m", self.k_m),
            ("D_r", self.d_r),
            ("D_p", self.d_p),
            ("g", self.g),
            ("h", self.h),
        ];
        let noise = self.process_std.iter().chain(&self.measurement_std).map(|v| ("noise std", *v));
        for (name, v) in scalars.into_iter().chain(noise) {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParameter {
                    name: name.to_string(),
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Parameter vector in the order of [`Furuta::param_names`].
    pub fn theta(&self) -> Vec<f64> {
        let mut t = vec![self.j_r, self.j_p, self.k_m, self.r_m, self.d_p, self.d_r];
        t.extend_from_slice(&self.process_std);
        t.extend_from_slice(&self.measurement_std);
        t
    }

    /// Copy with the inferred entries replaced by `theta`.
    pub fn with_theta(&self, theta: &[f64]) -> Self {
        let mut p = self.clone();
        p.j_r = theta[0];
        p.j_p = theta[1];
        p.k_m = theta[2];
        p.r_m = theta[3];
        p.d_p = theta[4];
        p.d_r = theta[5];
        p.process_std.copy_from_slice(&theta[6..10]);
        p.measurement_std.copy_from_slice(&theta[10..13]);
        p
    }
}

/// Physical coefficients with the inferred ones lifted to a dual type.
struct Physics<D> {
    m_p: f64,
    l_r: f64,
    l_p: f64,
    g: f64,
    j_r: D,
    j_p: D,
    k_m: D,
    r_m: D,
    d_p: D,
    d_r: D,
}

impl<D: DualNum<Primitive = f64> + Copy> Physics<D> {
    fn from_params(p: &FurutaParams) -> Self {
        Self {
            m_p: p.m_p,
            l_r: p.l_r,
            l_p: p.l_p,
            g: p.g,
            j_r: D::from(p.j_r),
            j_p: D::from(p.j_p),
            k_m: D::from(p.k_m),
            r_m: D::from(p.r_m),
            d_p: D::from(p.d_p),
            d_r: D::from(p.d_r),
        }
    }

    fn derivative(&self, x: &[D; 4], v: D) -> [D; 4] {
        let (s, c) = (x[1].sin(), x[1].cos());
        let (thd, ald) = (x[2], x[3]);
        let mp = self.m_p;
        let (lr, lp) = (self.l_r, self.l_p);

        let m11 = self.j_r + (-(c * c) + 1.0) * (0.25 * mp * lp * lp) + mp * lr * lr;
        let m12 = c * (0.5 * mp * lp * lr);
        let m22 = self.j_p + 0.25 * mp * lp * lp;

        // ν(ϑ̇, α̇) [ϑ̇, α̇]ᵀ
        let nu1 = s * c * ald * thd * (0.5 * mp * lp * lp) - s * ald * ald * (0.5 * mp * lp * lr);
        let nu2 = -(c * s * thd * thd * (0.25 * mp * lp * lp));

        let tau1 = self.k_m * (v - self.k_m * thd) / self.r_m - self.d_r * thd - nu1;
        let tau2 = -(s * (0.5 * mp * lp * self.g)) - self.d_p * ald - nu2;

        let det = m11 * m22 - m12 * m12;
        let thdd = (m22 * tau1 - m12 * tau2) / det;
        let aldd = (m11 * tau2 - m12 * tau1) / det;
        [thd, ald, thdd, aldd]
    }
}

/// `M(α)`.
pub fn mass_matrix(alpha: f64, p: &FurutaParams) -> Matrix2<f64> {
    let c = alpha.cos();
    let m11 = p.m_p * p.l_r * p.l_r + 0.25 * p.m_p * p.l_p * p.l_p * (1.0 - c * c) + p.j_r;
    let m12 = 0.5 * p.m_p * p.l_p * p.l_r * c;
    let m22 = p.j_p + 0.25 * p.m_p * p.l_p * p.l_p;
    Matrix2::new(m11, m12, m12, m22)
}

/// Kinetic plus potential energy, zero when hanging at rest.
pub fn total_energy(x: &[f64; 4], p: &FurutaParams) -> f64 {
    let m = mass_matrix(x[1], p);
    let qd = nalgebra::Vector2::new(x[2], x[3]);
    0.5 * qd.dot(&(m * qd)) + 0.5 * p.m_p * p.l_p * p.g * (1.0 - x[1].cos())
}

/// `[ϑ̇, α̇, ϑ̈, α̈]` at state `x` and voltage `v_m`.
pub fn furuta_continuous_dynamics(x: &[f64; 4], v_m: f64, p: &FurutaParams) -> Result<[f64; 4], ModelError> {
    if !(x.iter().all(|v| v.is_finite()) && v_m.is_finite()) {
        return Err(ModelError::NonFinite { what: "furuta state or input" });
    }
    Ok(Physics::<f64>::from_params(p).derivative(x, v_m))
}

/// Furuta pendulum as a [`SystemModel`].
///
/// `θ = [J_r, J_p, k_m, R_m, D_p, D_r, σ_w(4), σ_e(3)]`; mass, lengths,
/// gravity and the sampling interval are fixed by the parameter file.
#[derive(Debug, Clone)]
pub struct Furuta {
    params: FurutaParams,
}

const NAMES: [&str; 13] = [
    "J_r",
    "J_p",
    "k_m",
    "R_m",
    "D_p",
    "D_r",
    "w_theta",
    "w_alpha",
    "w_theta_dot",
    "w_alpha_dot",
    "e_theta",
    "e_alpha",
    "e_current",
];
const TRANSFORMS: [ParamTransform; 13] = [ParamTransform::Log; 13];
const N_PHYS: usize = 6;
const N_JAC: usize = 4 + 1 + N_PHYS;

impl Furuta {
    pub fn new(params: FurutaParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &FurutaParams {
        &self.params
    }

    fn physics_f64(&self, theta: &[f64]) -> Physics<f64> {
        Physics::from_params(&self.params.with_theta(theta))
    }

    fn state(x: &[f64]) -> [f64; 4] {
        [x[0], x[1], x[2], x[3]]
    }
}

impl SystemModel for Furuta {
    fn name(&self) -> &'static str {
        "furuta"
    }

    fn dims(&self) -> Dims {
        Dims { n_x: 4, n_u: 1, n_y: 3, n_theta: NAMES.len() }
    }

    fn param_names(&self) -> &[&'static str] {
        &NAMES
    }

    fn param_transforms(&self) -> &[ParamTransform] {
        &TRANSFORMS
    }

    fn process_noise_params(&self) -> &[usize] {
        &[6, 7, 8, 9]
    }

    fn measurement_noise_params(&self) -> &[usize] {
        &[10, 11, 12]
    }

    fn transition_mean(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64> {
        let phys = self.physics_f64(theta);
        rk4_step(|s| phys.derivative(s, u[0]), &Self::state(x), self.params.h).to_vec()
    }

    fn measurement_mean(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64> {
        let (k_m, r_m) = (theta[2], theta[3]);
        vec![x[0], x[1], (u[0] - k_m * x[2]) / r_m]
    }

    fn transition_jacobian(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Linearization {
        let mut point = SVector::<f64, N_JAC>::zeros();
        point.as_mut_slice()[..4].copy_from_slice(&x[..4]);
        point[4] = u[0];
        point.as_mut_slice()[5..].copy_from_slice(&theta[..N_PHYS]);
        let h = self.params.h;
        let base = &self.params;
        let (value, jac) = num_dual::jacobian(
            |s: SVector<DualSVec64<N_JAC>, N_JAC>| {
                let phys = Physics {
                    m_p: base.m_p,
                    l_r: base.l_r,
                    l_p: base.l_p,
                    g: base.g,
                    j_r: s[5],
                    j_p: s[6],
                    k_m: s[7],
                    r_m: s[8],
                    d_p: s[9],
                    d_r: s[10],
                };
                let x0 = [s[0], s[1], s[2], s[3]];
                SVector::from(rk4_step(|xs| phys.derivative(xs, s[4]), &x0, h))
            },
            &point,
        );
        let mut dtheta = DMatrix::zeros(4, NAMES.len());
        dtheta.view_mut((0, 0), (4, N_PHYS)).copy_from(&jac.fixed_view::<4, N_PHYS>(0, 5));
        Linearization {
            value: value.as_slice().to_vec(),
            dx: DMatrix::from_fn(4, 4, |i, j| jac[(i, j)]),
            du: DMatrix::from_fn(4, 1, |i, _| jac[(i, 4)]),
            dtheta,
        }
    }

    fn measurement_jacobian(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Linearization {
        let (k_m, r_m) = (theta[2], theta[3]);
        let current = (u[0] - k_m * x[2]) / r_m;
        let mut dx = DMatrix::zeros(3, 4);
        dx[(0, 0)] = 1.0;
        dx[(1, 1)] = 1.0;
        dx[(2, 2)] = -k_m / r_m;
        let mut du = DMatrix::zeros(3, 1);
        du[(2, 0)] = 1.0 / r_m;
        let mut dtheta = DMatrix::zeros(3, NAMES.len());
        dtheta[(2, 2)] = -x[2] / r_m;
        dtheta[(2, 3)] = -current / r_m;
        Linearization { value: vec![x[0], x[1], current], dx, du, dtheta }
    }

    fn state_from_measurement(&self, y: &[f64]) -> Vec<f64> {
        vec![y[0], y[1], 0.0, 0.0]
    }

    fn transition_curvature(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Option<Curvature> {
        let point = SVector::<f64, 5>::from([x[0], x[1], x[2], x[3], u[0]]);
        let h = self.params.h;
        let p = self.params.with_theta(theta);
        let out = num_dual::hessian(
            |s: SVector<num_dual::Dual2SVec64<5>, 5>| {
                let phys = Physics::from_params(&p);
                let x0 = [s[0], s[1], s[2], s[3]];
                rk4_step(|xs| phys.derivative(xs, s[4]), &x0, h)
            },
            &point,
        );
        let value = out.iter().map(|(f, _, _)| *f).collect();
        let jacobian = DMatrix::from_fn(4, 5, |i, j| out[i].1[j]);
        let hessians = out
            .iter()
            .map(|(_, _, hess)| DMatrix::from_fn(5, 5, |i, j| hess[(i, j)]))
            .collect();
        Some(Curvature { value, jacobian, hessians })
    }
}

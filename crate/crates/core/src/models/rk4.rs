use num_dual::DualNum;

/// One classical Runge-Kutta step of `ẋ = dynamics(x)` over `h` seconds.
///
/// The input is whatever `dynamics` closes over, so it is held constant
/// over the step (zero-order hold). Generic over dual numbers so the same
/// code yields exact derivatives of the discretised map.
pub fn rk4_step<T, F, const N: usize>(dynamics: F, x: &[T; N], h: f64) -> [T; N]
where
    T: DualNum<Primitive = f64> + Copy,
    F: Fn(&[T; N]) -> [T; N],
{
    let offset = |k: &[T; N], s: f64| -> [T; N] { std::array::from_fn(|i| x[i] + k[i] * s) };
    let k1 = dynamics(x);
    let k2 = dynamics(&offset(&k1, 0.5 * h));
    let k3 = dynamics(&offset(&k2, 0.5 * h));
    let k4 = dynamics(&offset(&k3, h));
    std::array::from_fn(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0))
}

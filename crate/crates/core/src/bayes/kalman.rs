//! Exact filtering for the scalar linear-Gaussian model, used as a
//! reference posterior for the sampler.

use crate::models::LinearFirstOrderParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

/// `p(x_k | y_{1:k})` for `k = 1..t`, starting from `x_1 ~ prior`.
pub fn filter(p: &LinearFirstOrderParams, prior: Gaussian, inputs: &[f64], outputs: &[f64]) -> Vec<Gaussian> {
    let mut out = Vec::with_capacity(outputs.len());
    let mut pred = prior;
    for k in 0..outputs.len() {
        let s = pred.var + p.r * p.r;
        let gain = pred.var / s;
        let post = Gaussian {
            mean: pred.mean + gain * (outputs[k] - pred.mean),
            var: (1.0 - gain) * pred.var,
        };
        out.push(post);
        pred = Gaussian {
            mean: p.a * post.mean + p.b * inputs[k],
            var: p.a * p.a * post.var + p.q * p.q,
        };
    }
    out
}

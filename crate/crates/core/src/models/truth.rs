use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::SystemModel;
use crate::seed;

/// Incremental simulator of the true plant.
///
/// Each step measures the current state under the applied input, then
/// advances the state with fresh process noise.
pub struct TruthSimulator<'a> {
    model: &'a dyn SystemModel,
    theta: Vec<f64>,
    state: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> TruthSimulator<'a> {
    pub fn new(model: &'a dyn SystemModel, theta: Vec<f64>, x0: Vec<f64>, rng: ChaCha8Rng) -> Self {
        Self { model, theta, state: x0, rng }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    fn gaussian(&mut self, std: &[f64]) -> Vec<f64> {
        std.iter()
            .map(|s| {
                let z: f64 = self.rng.sample(StandardNormal);
                s.max(0.0) * z
            })
            .collect()
    }

    pub fn measure(&mut self, u: &[f64]) -> Vec<f64> {
        let e = self.gaussian(&self.model.measurement_std(&self.theta));
        self.model.measurement(&self.state, u, &self.theta, &e)
    }

    /// Advances the state; returns the process-noise draw that was applied.
    pub fn advance(&mut self, u: &[f64]) -> Vec<f64> {
        let w = self.gaussian(&self.model.process_std(&self.theta));
        self.state = self.model.transition(&self.state, u, &self.theta, &w);
        w
    }
}

/// Simulates `inputs.len()` steps from `x0`. Returns the visited states
/// `x_1..x_T` (with `x_1 = x0`) and the measurements `y_1..y_T`.
pub fn simulate_truth(
    model: &dyn SystemModel,
    theta: &[f64],
    x0: &[f64],
    inputs: &[Vec<f64>],
    rng_seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let rng = seed::rng_for(rng_seed, seed::stream::TRUTH, 0);
    let mut sim = TruthSimulator::new(model, theta.to_vec(), x0.to_vec(), rng);
    let mut states = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for u in inputs {
        states.push(sim.state().to_vec());
        outputs.push(sim.measure(u));
        sim.advance(u);
    }
    (states, outputs)
}

//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting. The line goes straight to stderr, past the test
//! harness capture, so a plain `cargo test` shows the summary.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bayes_mpc::bayes::{log_target, Dataset, PosteriorTarget, PriorSpec};
use bayes_mpc::config::ExperimentConfig;
use bayes_mpc::hmc::{effective_sample_size, run_chains, HmcConfig, LogDensity};
use bayes_mpc::models::{mass_matrix, simulate_truth, FurutaParams, LinearFirstOrder, LinearFirstOrderParams};
use bayes_mpc::smpc::{
    chance_estimate, control_action, newton_inner, sigmoid, BarrierObjective, BarrierProblem, ContinuationState,
    ControlProblem, Scenario, SolveStatus, StateBound,
};
use bayes_mpc::{run_closed_loop, ClosedLoopRun, EvalError, SolverError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Timed criteria run one at a time so their wall-clock budgets are honest.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn pedagogical() -> ExperimentConfig {
    ExperimentConfig::from_json(include_str!("../../../configs/pedagogical.json")).unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn central_difference(f: impl Fn(&[f64]) -> f64, z: &[f64], i: usize) -> f64 {
    let h = 1e-6 * (z[i].abs() + 1.0);
    let mut a = z.to_vec();
    let mut b = z.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

fn max_relative_error(analytic: &[f64], f: impl Fn(&[f64]) -> f64, z: &[f64]) -> f64 {
    (0..z.len())
        .map(|i| (central_difference(&f, z, i) - analytic[i]).abs() / analytic[i].abs().max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let model = LinearFirstOrder;
    let truth = LinearFirstOrderParams::nominal().theta();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let horizon = 10;

    let inputs: Vec<Vec<f64>> = (0..30).map(|k| vec![(0.3 * k as f64).sin()]).collect();
    let (_, outputs) = simulate_truth(&model, &truth, &[0.0], &inputs, 1);
    let data = Dataset::new(inputs, outputs).unwrap();
    let target = PosteriorTarget::new(&model, PriorSpec::weakly_informative(&model), data, horizon).unwrap();
    let dim = target.dim();
    let mut worst_target: f64 = 0.0;
    for _ in 0..100 {
        let eta: Vec<f64> = (0..dim).map(|_| 0.5 * normal(&mut rng)).collect();
        let (_, grad) = target.log_density_and_gradient(&eta).unwrap();
        worst_target = worst_target.max(max_relative_error(&grad, |z| log_target(&target, z).unwrap(), &eta));
    }

    let problem = ControlProblem {
        horizon,
        state_weight: vec![vec![1.0]],
        input_weight: vec![vec![0.01]],
        setpoint: vec![1.0],
        input_lower: vec![None],
        input_upper: vec![Some(2.0)],
        state_bounds: vec![StateBound { state: 0, lower: None, upper: Some(1.2) }],
        delta: 0.05,
        slack_weight: 100.0,
        slack_offset: 0.0,
    };
    let scenarios: Vec<Scenario> = (0..16)
        .map(|_| Scenario {
            state: vec![0.5 + 0.2 * normal(&mut rng)],
            theta: vec![0.9 + 0.02 * normal(&mut rng), 0.1 + 0.01 * normal(&mut rng), 0.05, 0.01],
            disturbances: (0..=horizon).map(|_| vec![0.05 * normal(&mut rng)]).collect(),
        })
        .collect();
    let mut worst_barrier: f64 = 0.0;
    for i in 0..100 {
        let (mu, gamma) = [(1.0, 1.0), (0.1, 0.2), (1e-3, 0.05), (1e-5, 1e-3)][i % 4];
        let obj = BarrierObjective::new(&model, &scenarios, &[0.1], &problem, mu, gamma).unwrap();
        let inputs: Vec<Vec<f64>> = (0..=horizon).map(|_| vec![rng.random_range(-1.0..1.9)]).collect();
        let slack = obj.feasible_slack(&inputs).unwrap() + rng.random_range(0.01..0.3);
        let z = BarrierObjective::join(&inputs, slack);
        let e = obj.evaluate(&z).unwrap();
        worst_barrier = worst_barrier.max(max_relative_error(e.gradient.as_slice(), |z| obj.value(z).unwrap(), &z));
    }

    let elapsed = started.elapsed();
    report(
        1,
        worst_target < 1e-5 && worst_barrier < 1e-5 && elapsed < Duration::from_secs(30),
        &format!("max rel. error log target {worst_target:.2e}, barrier {worst_barrier:.2e}, {elapsed:.1?}"),
    );
}

struct Anisotropic {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl LogDensity for Anisotropic {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_density_and_gradient(&self, q: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let z: Vec<f64> = (0..q.len()).map(|i| (q[i] - self.mean[i]) / self.std[i]).collect();
        let value = -0.5 * z.iter().map(|v| v * v).sum::<f64>();
        Ok((value, (0..q.len()).map(|i| -z[i] / self.std[i]).collect()))
    }
}

#[test]
fn criterion_2_sampler_recovers_anisotropic_gaussian() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let target = Anisotropic { mean: vec![1.0, -2.0, 0.0, 3.0, 0.5], std: vec![0.1, 1.0, 3.0, 0.5, 2.0] };
    let cfg = HmcConfig { n_warmup: 500, n_keep: 500, n_chains: 4, seed: 0, ..Default::default() };
    let out = run_chains(&target, &vec![vec![0.0; 5]; 4], &cfg).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for j in 0..5 {
        let xs: Vec<f64> = out.chains.iter().flat_map(|c| c.draws.iter().map(move |d| d[j])).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (target.std[j].powi(2) / out.diagnostics.ess[j]).sqrt();
        let mean_z = (m - target.mean[j]).abs() / se;
        let var_rel = v / target.std[j].powi(2) - 1.0;
        let rhat = out.diagnostics.rhat[j];
        ok &= mean_z < 3.0 && var_rel.abs() < 0.1 && rhat < 1.05;
        detail.push(format!("x{j}: |z|={mean_z:.2} var {var_rel:+.3} R-hat {rhat:.3}"));
    }
    let elapsed = started.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    report(2, ok, &format!("{}; {elapsed:.1?}", detail.join(", ")));
}

/// Forward Kalman filter for `x_{k+1} = a x_k + b u_k + w`, `y_k = x_k + e`,
/// with `x_1 ~ N(m0, p0)`. Returns `(mean, var)` of `p(x_k | y_{1:k})`.
fn kalman_oracle(p: &LinearFirstOrderParams, m0: f64, p0: f64, u: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    let (mut m, mut v) = (m0, p0);
    let mut out = Vec::new();
    for k in 0..y.len() {
        let gain = v / (v + p.r.powi(2));
        m += gain * (y[k] - m);
        v *= 1.0 - gain;
        out.push((m, v));
        m = p.a * m + p.b * u[k];
        v = p.a.powi(2) * v + p.q.powi(2);
    }
    out
}

#[test]
fn criterion_3_state_posterior_matches_kalman_filter() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let model = LinearFirstOrder;
    let p = LinearFirstOrderParams::nominal();
    let inputs: Vec<Vec<f64>> = (0..50).map(|k| vec![if (k / 5) % 2 == 0 { 1.0 } else { -0.5 }]).collect();
    let (_, outputs) = simulate_truth(&model, &p.theta(), &[0.0], &inputs, 3);
    let u: Vec<f64> = inputs.iter().map(|v| v[0]).collect();
    let y: Vec<f64> = outputs.iter().map(|v| v[0]).collect();
    let oracle = kalman_oracle(&p, 0.0, 1.0, &u, &y);

    let priors = PriorSpec::weakly_informative(&model).with_fixed_params(&p.theta());
    let mut ok = true;
    let mut detail = Vec::new();
    for &t in &[5usize, 25, 50] {
        let data = Dataset::new(inputs[..t].to_vec(), outputs[..t].to_vec()).unwrap();
        let target = PosteriorTarget::new(&model, priors.clone(), data, 0).unwrap();
        let inits: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0; target.dim()]).collect();
        let cfg = HmcConfig { seed: t as u64, ..Default::default() };
        let out = run_chains(&target, &inits, &cfg).unwrap();
        let j = t - 1;
        let series: Vec<Vec<f64>> = out.chains.iter().map(|c| c.draws.iter().map(|d| d[j]).collect()).collect();
        let xs: Vec<f64> = series.concat();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        let (km, kv) = oracle[j];
        let ks = kv.sqrt();
        let ess = effective_sample_size(&series);
        let mean_z = (mean - km).abs() / (std / ess.sqrt());
        // The standard error of the std follows from that of the squared
        // deviations, whose autocorrelation differs from that of x itself.
        let squares: Vec<Vec<f64>> = series.iter().map(|c| c.iter().map(|x| (x - mean).powi(2)).collect()).collect();
        let sq_sd = (squares.concat().iter().map(|s| (s - var).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let std_se = sq_sd / effective_sample_size(&squares).sqrt() / (2.0 * std);
        let std_z = (std - ks).abs() / std_se;
        ok &= mean_z < 3.0 && std_z < 3.0;
        detail.push(format!("t={t}: mean |z|={mean_z:.2}, std |z|={std_z:.2}, ESS {ess:.0}"));
    }
    report(3, ok, &detail.join("; "));
}

#[test]
fn criterion_4_sigmoid_approaches_indicator() {
    let gamma = 1e-3;
    let mut worst: f64 = 0.0;
    for i in 0..=10_000 {
        let z = 0.01 * 10f64.powf(i as f64 * 4.0 / 10_000.0);
        worst = worst.max((sigmoid(z, gamma) - 1.0).abs()).max(sigmoid(-z, gamma).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_chance: f64 = 0.0;
    for _ in 0..200 {
        let margins: Vec<f64> = (0..rng.random_range(1..200))
            .map(|_| {
                let m = rng.random_range(0.01..5.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect();
        let indicator = margins.iter().filter(|m| **m >= 0.0).count() as f64 / margins.len() as f64;
        worst_chance = worst_chance.max((chance_estimate(&margins, gamma) - indicator).abs());
    }
    report(
        4,
        worst < 1e-4 && worst_chance < 1e-4,
        &format!("max |σ − I| {worst:.2e}, max chance error {worst_chance:.2e}"),
    );
}

/// Minimises `½ vᵀHv + fᵀv` over a box by enumerating every active set.
fn box_qp_oracle(h: &DMatrix<f64>, f: &DVector<f64>, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = c % 3;
            c /= 3;
        }
        let mut v: Vec<f64> = (0..n).map(|i| [0.0, lo[i], hi[i]][state[i]]).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -f[free[a]] - (0..n).filter(|j| state[*j] != 0).map(|j| h[(free[a], j)] * v[j]).sum::<f64>()
            });
            let sol = hf.lu().solve(&rhs).unwrap();
            for (a, &i) in free.iter().enumerate() {
                v[i] = sol[a];
            }
        }
        if (0..n).any(|i| v[i] < lo[i] - 1e-12 || v[i] > hi[i] + 1e-12) {
            continue;
        }
        let vv = DVector::from_vec(v.clone());
        let obj = 0.5 * vv.dot(&(h * &vv)) + f.dot(&vv);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, v));
        }
    }
    best.unwrap().1
}

/// `(u − 1)² − μ ln(2 − u)`; its minimiser solves `2(u − 1)(2 − u) = μ`.
struct BarrierToy {
    mu: f64,
}

impl BarrierProblem for BarrierToy {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, z: &[f64]) -> Result<f64, SolverError> {
        if z[0] >= 2.0 {
            return Err(SolverError::Infeasible("u ≥ 2".into()));
        }
        Ok((z[0] - 1.0).powi(2) - self.mu * (2.0 - z[0]).ln())
    }
    fn derivatives(&self, z: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>), SolverError> {
        let v = self.value(z)?;
        let c = 2.0 - z[0];
        Ok((
            v,
            DVector::from_element(1, 2.0 * (z[0] - 1.0) + self.mu / c),
            DMatrix::from_element(1, 1, 2.0 + self.mu / (c * c)),
        ))
    }
    fn max_step(&self, z: &[f64], p: &[f64]) -> f64 {
        if p[0] > 0.0 { (2.0 - z[0]) / p[0] } else { f64::INFINITY }
    }
}

#[test]
fn criterion_5_solver_matches_qp_oracle_and_toy_root() {
    let model = LinearFirstOrder;
    let p = LinearFirstOrderParams { a: 0.9, b: 0.5, q: 0.05, r: 0.01 };
    let horizon = 4;
    let (lo, hi) = (-0.3, 0.8);
    let (q, r) = (2.0, 0.05);
    let problem = ControlProblem {
        horizon,
        state_weight: vec![vec![q]],
        input_weight: vec![vec![r]],
        setpoint: vec![1.0],
        input_lower: vec![Some(lo)],
        input_upper: vec![Some(hi)],
        state_bounds: vec![],
        delta: 0.01,
        slack_weight: 100.0,
        slack_offset: 0.0,
    };
    let (x_t, u_t) = (-0.2, 0.1);
    let scenario = Scenario { state: vec![x_t], theta: p.theta(), disturbances: vec![vec![0.0]; horizon + 1] };
    let cont = ContinuationState { tolerance: 1e-9, ..Default::default() };
    let d = control_action(&model, &[scenario], &[u_t], &problem, &cont, None).unwrap();

    let n = horizon + 1;
    let mut c = vec![p.a * x_t + p.b * u_t];
    for k in 1..n {
        c.push(p.a * c[k - 1]);
    }
    let g = DMatrix::from_fn(n, n, |k, j| if j < k { p.a.powi((k - 1 - j) as i32) * p.b } else { 0.0 });
    let e = DVector::from_iterator(n, c.iter().map(|v| v - 1.0));
    let h = g.transpose() * &g * (2.0 * q) + DMatrix::identity(n, n) * (2.0 * r);
    let f = g.transpose() * e * (2.0 * q);
    let oracle = box_qp_oracle(&h, &f, &vec![lo; n], &vec![hi; n]);
    let qp_error = (0..n).map(|k| (d.inputs[k][0] - oracle[k]).abs()).fold(0.0, f64::max);

    let toy = BarrierToy { mu: 0.1 };
    let root = 0.952_277_442_494_833_9;
    let mut z = vec![0.0];
    for _ in 0..50 {
        let s = newton_inner(&toy, &z, 1e-20, 1e-4).unwrap();
        let done = s.converged || s.z == z;
        z = s.z;
        if done {
            break;
        }
    }
    let toy_error = (z[0] - root).abs();
    report(
        5,
        d.converged() && qp_error < 1e-4 && toy_error < 1e-8,
        &format!("QP max error {qp_error:.2e} ({:?}), toy root error {toy_error:.2e}", d.status),
    );
}

/// The pedagogical closed loop is shared by criteria 6 and 7.
fn pedagogical_run() -> &'static (ClosedLoopRun, Duration) {
    static RUN: std::sync::OnceLock<(ClosedLoopRun, Duration)> = std::sync::OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = pedagogical();
        cfg.snapshot_steps = vec![25];
        let started = Instant::now();
        let run = run_closed_loop(&cfg, |r| eprintln!("pedagogical t = {:2}: x = {:+.4}, u = {:+.4}", r.t, r.true_state[0], r.input[0]))
            .unwrap();
        (run, started.elapsed())
    })
}

#[test]
fn criterion_6_pedagogical_closed_loop() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = pedagogical();
    let (run, elapsed) = pedagogical_run();
    let records = &run.records;
    assert_eq!(records.len(), 50);
    let bound = 1.2;
    let late = &records[25..];
    let violation_rate = late.iter().filter(|r| r.true_state[0] > bound).count() as f64 / late.len() as f64;
    let (at5, at50) = (&records[4], &records[49]);
    let a_err = (at50.param_mean[0] - 0.9).abs();
    let b_err = (at50.param_mean[1] - 0.1).abs();
    let shrinks = (0..4).all(|i| at50.param_std[i] < at5.param_std[i]);
    let in_box = records.iter().all(|r| cfg.control.input_in_box(&r.input));
    let ok = violation_rate <= 0.10 && a_err <= 0.05 && b_err <= 0.05 && shrinks && in_box && *elapsed <= Duration::from_secs(600);
    report(
        6,
        ok,
        &format!(
            "violation rate {violation_rate:.2}, |a−0.9| {a_err:.3}, |b−0.1| {b_err:.3}, std t=5 {:?} t=50 {:?}, inputs in box {in_box}, {elapsed:.1?}",
            at5.param_std, at50.param_std
        ),
    );
}

#[test]
fn criterion_7_horizon_uncertainty_grows() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (run, _) = pedagogical_run();
    let snap = run.snapshots.iter().find(|s| s.t == 25).expect("snapshot at t = 25");
    let widths: Vec<f64> = snap.rows.iter().map(|r| r.quantiles[0][4] - r.quantiles[0][0]).collect();
    let ok = widths.windows(2).all(|w| w[1] >= w[0]);
    report(7, ok, &format!("q95 − q05 along the horizon at t = 25: {widths:.4?}"));
}

/// Slow (about two minutes on one core); skip with `--skip slow`.
#[test]
fn criterion_8_furuta_smoke_test_slow() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = ExperimentConfig::from_json(include_str!("../../../configs/furuta.json")).unwrap();
    cfg.steps = 20;
    cfg.control.horizon = 10;
    cfg.scenarios = 50;
    let started = Instant::now();
    let run = run_closed_loop(&cfg, |r| {
        eprintln!(
            "furuta t = {:2}: arm {:+.3}, pendulum {:+.3}, u = {:+.3}, {:?}, acceptance [{:.3}, {:.3}]",
            r.t, r.true_state[0], r.true_state[1], r.input[0], r.solver_status, r.min_acceptance, r.max_acceptance
        )
    });
    let elapsed = started.elapsed();
    let run = match run {
        Ok(run) => run,
        Err(e) => return report(8, false, &format!("closed loop failed: {e}")),
    };
    let truth = FurutaParams::qube_servo2();
    let records = &run.records;
    let stalls = records.iter().filter(|r| r.solver_status == SolveStatus::Stalled).count();
    let arm_bound = cfg.control.state_bounds[0].upper.unwrap();
    let satisfied = records.iter().filter(|r| r.true_state[0].abs() <= arm_bound).count() as f64 / records.len() as f64;
    let spd = records.iter().all(|r| {
        let m = mass_matrix(r.true_state[1], &truth);
        m[(0, 0)] > 0.0 && m.determinant() > 0.0
    });
    let finite = records.iter().all(|r| {
        r.param_mean.iter().chain(&r.state_mean).chain(&r.true_state).all(|v| v.is_finite())
    });
    let (lo, hi) = records
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.min_acceptance), hi.max(r.max_acceptance)));
    let ok = stalls == 0
        && satisfied >= 0.9
        && spd
        && finite
        && lo >= 0.2
        && hi <= 0.99
        && elapsed <= Duration::from_secs(1200);
    report(
        8,
        ok,
        &format!(
            "stalls {stalls}, arm bound satisfied {satisfied:.2}, mass matrix SPD {spd}, finite {finite}, acceptance [{lo:.2}, {hi:.2}], {elapsed:.1?}"
        ),
    );
}

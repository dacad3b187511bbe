use super::*;
use crate::models::{Furuta, FurutaParams, LinearFirstOrder, LinearFirstOrderParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn linear_problem(horizon: usize) -> ControlProblem {
    ControlProblem {
        horizon,
        state_weight: vec![vec![1.0]],
        input_weight: vec![vec![0.1]],
        setpoint: vec![1.0],
        input_lower: vec![None],
        input_upper: vec![Some(2.0)],
        state_bounds: vec![StateBound { state: 0, lower: None, upper: Some(1.2) }],
        delta: 0.05,
        slack_weight: 100.0,
        slack_offset: 0.0,
    }
}

fn linear_scenarios(m: usize, horizon: usize, seed: u64, spread: f64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = move || rng.sample::<f64, _>(StandardNormal);
    (0..m)
        .map(|_| Scenario {
            state: vec![0.5 + spread * n()],
            theta: vec![0.9 + 0.02 * spread * n(), 0.1 + 0.01 * spread * n(), 0.05, 0.01],
            disturbances: (0..=horizon).map(|_| vec![0.05 * spread * n()]).collect(),
        })
        .collect()
}

#[test]
fn sigmoid_values() {
    assert_eq!(sigmoid(0.0, 0.3), 0.5);
    assert!((sigmoid(0.7, 0.7) - 0.731_058_578_630_004_9).abs() < 1e-15);
    assert!(sigmoid(1.0, 1e-6) >= 1.0 - f64::EPSILON);
    assert!(sigmoid(-1.0, 1e-6) >= 0.0);
    assert!(sigmoid(-1e6, 1.0).is_finite());
}

proptest! {
    #[test]
    fn sigmoid_is_symmetric(z in -50.0f64..50.0, g in 1e-3f64..10.0) {
        prop_assert!((sigmoid(z, g) + sigmoid(-z, g) - 1.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn sigmoid_is_increasing(z in -5.0f64..5.0, dz in 1e-3f64..1.0, g in 0.1f64..10.0) {
        prop_assert!(sigmoid(z + dz, g) > sigmoid(z, g));
    }

    #[test]
    fn slackening_never_lowers_chance(margins in prop::collection::vec(-2.0f64..2.0, 1..30), shift in 0.0f64..1.0, g in 1e-3f64..1.0) {
        let shifted: Vec<f64> = margins.iter().map(|m| m + shift).collect();
        prop_assert!(chance_estimate(&shifted, g) >= chance_estimate(&margins, g));
    }

    #[test]
    fn sharper_sigmoid_approaches_indicator(margins in prop::collection::vec(prop_oneof![-3.0f64..-0.01, 0.01f64..3.0], 1..30)) {
        let indicator = margins.iter().filter(|m| **m > 0.0).count() as f64 / margins.len() as f64;
        let mut g = 1e-3;
        let mut prev = (chance_estimate(&margins, g) - indicator).abs();
        for _ in 0..5 {
            g *= 0.5;
            let gap = (chance_estimate(&margins, g) - indicator).abs();
            prop_assert!(gap <= prev);
            prev = gap;
        }
    }
}

#[test]
fn sigmoid_derivatives_match_differences() {
    for &(z, g) in &[(0.3, 1.0), (-0.1, 0.2), (2.0, 0.7)] {
        let (_, d1, d2) = sigmoid_derivatives(z, g);
        let h = 1e-5;
        let fd1 = (sigmoid(z + h, g) - sigmoid(z - h, g)) / (2.0 * h);
        let fd2 = (sigmoid_derivatives(z + h, g).1 - sigmoid_derivatives(z - h, g).1) / (2.0 * h);
        assert!((d1 - fd1).abs() < 1e-9);
        assert!((d2 - fd2).abs() < 1e-8);
    }
}

#[test]
fn chance_estimate_examples() {
    assert!((chance_estimate(&[5.0, 8.0, 100.0], 1e-3) - 1.0).abs() < 1e-9);
    assert!((chance_estimate(&[4.0, -4.0], 1e-2) - 0.5).abs() < 1e-15);
    let g = 0.25;
    assert!((chance_estimate(&[g, -g], g) - 0.5).abs() < 1e-15);
}

#[test]
fn relaxation_limit() {
    let g = 1e-3;
    for i in 0..2000 {
        let z = 0.01 + i as f64 * 0.005;
        assert!((sigmoid(z, g) - 1.0).abs() < 1e-4);
        assert!(sigmoid(-z, g).abs() < 1e-4);
    }
}

#[test]
fn mc_cost_hand_example() {
    let m = LinearFirstOrder;
    let mut p = linear_problem(1);
    p.state_bounds.clear();
    let s = Scenario { state: vec![0.5], theta: LinearFirstOrderParams::nominal().theta(), disturbances: vec![vec![0.0]; 2] };
    let inputs = vec![vec![0.3], vec![0.7]];
    let c = mc_cost(&m, &[s.clone()], &[0.2], &inputs, &p).unwrap();
    assert!((c - 0.638109).abs() < 1e-12, "{c}");
    let same = mc_cost(&m, &vec![s; 7], &[0.2], &inputs, &p).unwrap();
    assert!((same - c).abs() < 1e-14);
}

#[test]
fn mc_cost_zero_with_input_weight_only() {
    let m = LinearFirstOrder;
    let mut p = linear_problem(4);
    p.state_weight = vec![vec![0.0]];
    p.input_weight = vec![vec![1.0]];
    let s = linear_scenarios(5, 4, 1, 1.0);
    assert_eq!(mc_cost(&m, &s, &[0.3], &vec![vec![0.0]; 5], &p).unwrap(), 0.0);
}

fn feasible_point(obj: &BarrierObjective<'_>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = obj.problem();
    let inputs: Vec<Vec<f64>> = (0..=p.horizon).map(|_| vec![rng.random_range(-1.0..1.9)]).collect();
    let slack = obj.feasible_slack(&inputs).unwrap() + rng.random_range(0.01..0.3);
    BarrierObjective::join(&inputs, slack)
}

fn check_derivatives(obj: &BarrierObjective<'_>, z: &[f64], grad_tol: f64, hess_tol: f64) {
    let e = obj.evaluate(z).unwrap();
    for i in 0..z.len() {
        let h = 1e-6 * (z[i].abs() + 1.0);
        let mut a = z.to_vec();
        let mut b = z.to_vec();
        a[i] += h;
        b[i] -= h;
        let fd = (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (2.0 * h);
        let rel = (fd - e.gradient[i]).abs() / e.gradient[i].abs().max(1.0);
        assert!(rel < grad_tol, "gradient {i}: {} vs {fd}", e.gradient[i]);
        let (ga, gb) = (obj.evaluate(&a).unwrap().gradient, obj.evaluate(&b).unwrap().gradient);
        for j in 0..z.len() {
            let fd = (ga[j] - gb[j]) / (2.0 * h);
            let rel = (fd - e.hessian[(i, j)]).abs() / e.hessian[(i, j)].abs().max(1.0);
            assert!(rel < hess_tol, "hessian ({i},{j}): {} vs {fd}", e.hessian[(i, j)]);
        }
    }
}

#[test]
fn barrier_derivatives_linear() {
    let m = LinearFirstOrder;
    let p = linear_problem(10);
    let s = linear_scenarios(16, 10, 3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for &(mu, gamma) in &[(1.0, 1.0), (0.1, 0.2), (1e-3, 0.05)] {
        let obj = BarrierObjective::new(&m, &s, &[0.1], &p, mu, gamma).unwrap();
        for _ in 0..5 {
            let z = feasible_point(&obj, &mut rng);
            check_derivatives(&obj, &z, 1e-5, 1e-4);
        }
    }
}

#[test]
fn barrier_derivatives_furuta() {
    let m = Furuta::new(FurutaParams::qube_servo2());
    let theta = m.params().theta();
    let horizon = 4;
    let problem = ControlProblem {
        horizon,
        state_weight: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 5.0, 0.0, 0.0], vec![0.0, 0.0, 0.1, 0.0], vec![0.0, 0.0, 0.0, 0.1]],
        input_weight: vec![vec![0.01]],
        setpoint: vec![0.0, std::f64::consts::PI, 0.0, 0.0],
        input_lower: vec![Some(-10.0)],
        input_upper: vec![Some(10.0)],
        state_bounds: vec![StateBound { state: 0, lower: Some(-0.5), upper: Some(0.5) }],
        delta: 0.05,
        slack_weight: 100.0,
        slack_offset: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scenarios: Vec<Scenario> = (0..4)
        .map(|_| Scenario {
            state: vec![0.01 * rng.sample::<f64, _>(StandardNormal), 0.3, 0.0, 0.2],
            theta: theta.clone(),
            disturbances: (0..=horizon).map(|_| vec![0.0, 0.0, 0.01 * rng.sample::<f64, _>(StandardNormal), 0.0]).collect(),
        })
        .collect();
    let obj = BarrierObjective::new(&m, &scenarios, &[1.0], &problem, 0.1, 0.1).unwrap();
    let inputs: Vec<Vec<f64>> = (0..=horizon).map(|k| vec![3.0 - k as f64]).collect();
    let slack = obj.feasible_slack(&inputs).unwrap() + 0.1;
    check_derivatives(&obj, &BarrierObjective::join(&inputs, slack), 1e-5, 1e-4);
}

#[test]
fn vanishing_barrier_leaves_penalty_plus_cost() {
    let m = LinearFirstOrder;
    let p = linear_problem(5);
    let s = linear_scenarios(10, 5, 4, 1.0);
    let inputs = vec![vec![0.4]; 6];
    let obj = BarrierObjective::new(&m, &s, &[0.0], &p, 1e-12, 0.1).unwrap();
    let slack = obj.feasible_slack(&inputs).unwrap() + 0.05;
    let v = obj.evaluate(&BarrierObjective::join(&inputs, slack)).unwrap().value;
    let expect = p.slack_weight * slack * slack + mc_cost(&m, &s, &[0.0], &inputs, &p).unwrap();
    assert!((v - expect).abs() < 1e-9);
}

#[test]
fn infeasible_points_are_reported() {
    let m = LinearFirstOrder;
    let p = linear_problem(3);
    let s = linear_scenarios(4, 3, 5, 1.0);
    let obj = BarrierObjective::new(&m, &s, &[0.0], &p, 1.0, 1.0).unwrap();
    let over = BarrierObjective::join(&vec![vec![2.5]; 4], 0.5);
    assert!(matches!(obj.evaluate(&over), Err(crate::error::SolverError::Infeasible(_))));
    let low_slack = BarrierObjective::join(&vec![vec![0.0]; 4], 0.01);
    assert!(matches!(obj.value(&low_slack), Err(crate::error::SolverError::Infeasible(_))));
    assert!(matches!(obj.value(&[f64::NAN, 0.0, 0.0, 0.0, 0.5]), Err(crate::error::SolverError::Overflow)));
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let m = LinearFirstOrder;
    let p = linear_problem(10);
    let s = linear_scenarios(100, 10, 6, 1.0);
    let obj = BarrierObjective::new(&m, &s, &[0.1], &p, 0.5, 0.3).unwrap();
    let z = BarrierObjective::join(&vec![vec![0.7]; 11], obj.feasible_slack(&vec![vec![0.7]; 11]).unwrap() + 0.1);
    let eval = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| obj.evaluate(&z).unwrap())
    };
    let (a, b) = (eval(1), eval(4));
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.gradient, b.gradient);
    assert_eq!(a.hessian, b.hessian);
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
        let mut v = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
        for i in 0..n {
            v[i] = match state[i] {
                1 => lo[i],
                2 => hi[i],
                _ => 0.0,
            };
        }
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

#[test]
fn matches_box_qp_oracle_without_chance_constraints() {
    let m = LinearFirstOrder;
    let params = LinearFirstOrderParams { a: 0.9, b: 0.5, q: 0.05, r: 0.01 };
    let horizon = 4;
    let (lo, hi) = (-0.3, 0.8);
    let problem = ControlProblem {
        horizon,
        state_weight: vec![vec![2.0]],
        input_weight: vec![vec![0.05]],
        setpoint: vec![1.0],
        input_lower: vec![Some(lo)],
        input_upper: vec![Some(hi)],
        state_bounds: vec![],
        delta: 0.01,
        slack_weight: 100.0,
        slack_offset: 0.0,
    };
    let (x_t, u_t) = (-0.2, 0.1);
    let scenario = Scenario { state: vec![x_t], theta: params.theta(), disturbances: vec![vec![0.0]; horizon + 1] };
    let cont = ContinuationState { tolerance: 1e-9, ..Default::default() };
    let d = control_action(&m, &[scenario], &[u_t], &problem, &cont, None).unwrap();
    assert!(d.converged(), "{:?}", d.status);
    assert!(d.slack >= problem.delta);

    // x̄_k = c_k + Σ_j G[k,j] v_j; cost Σ q (x̄_k − 1)² + r Σ v².
    let n = horizon + 1;
    let mut c = vec![params.a * x_t + params.b * u_t];
    for k in 1..n {
        c.push(params.a * c[k - 1]);
    }
    let g = DMatrix::from_fn(n, n, |k, j| if j < k { params.a.powi((k - 1 - j) as i32) * params.b } else { 0.0 });
    let e = DVector::from_iterator(n, c.iter().map(|v| v - 1.0));
    let h = g.transpose() * &g * (2.0 * 2.0) + DMatrix::identity(n, n) * (2.0 * 0.05);
    let f = g.transpose() * e * (2.0 * 2.0);
    let oracle = box_qp_oracle(&h, &f, &[lo; 5], &[hi; 5]);
    assert!(oracle.iter().any(|v| (*v - hi).abs() < 1e-12), "instance should have an active bound: {oracle:?}");
    for k in 0..n {
        assert!((d.inputs[k][0] - oracle[k]).abs() < 1e-4, "k={k}: {} vs {}", d.inputs[k][0], oracle[k]);
    }
}

#[test]
fn continuation_trace_reaches_floors_monotonically() {
    let m = LinearFirstOrder;
    let p = linear_problem(10);
    let s = linear_scenarios(50, 10, 7, 1.0);
    let cont = ContinuationState::default();
    let d = control_action(&m, &s, &[0.0], &p, &cont, None).unwrap();
    assert!(d.converged());
    let last = d.trace.last().unwrap();
    assert_eq!(last.mu, cont.mu_floor);
    assert_eq!(last.gamma, cont.gamma_floor);
    for w in d.trace.windows(2) {
        assert!(w[1].mu <= w[0].mu && w[1].gamma <= w[0].gamma);
        if w[1].mu == w[0].mu && w[1].gamma == w[0].gamma {
            assert!(w[1].cost <= w[0].cost + 1e-12 * w[0].cost.abs().max(1.0));
        }
    }
    let mut expect = cont.mu;
    let mut seen = vec![];
    for r in &d.trace {
        if seen.last() != Some(&r.mu) {
            seen.push(r.mu);
        }
    }
    for mu in seen {
        assert!((mu - expect).abs() <= 1e-15 * expect);
        expect = (expect * cont.mu_shrink).max(cont.mu_floor);
    }
}

#[test]
fn solution_respects_box_and_slack_and_chance_level() {
    let m = LinearFirstOrder;
    let p = linear_problem(10);
    let s = linear_scenarios(200, 10, 9, 1.5);
    let d = control_action(&m, &s, &[0.0], &p, &ContinuationState::default(), None).unwrap();
    assert!(d.converged());
    assert!(d.slack >= p.delta);
    assert!(d.inputs.iter().all(|u| u[0] < 2.0));
    assert!(d.chance.iter().all(|g| *g > 1.0 - d.slack));
    // Recount violations with the indicator over the same samples.
    for k in 0..=p.horizon {
        let violating = s
            .iter()
            .filter(|sc| {
                let xs = rollout(&m, &sc.state, &[0.0], &sc.theta, &d.inputs, &sc.disturbances).unwrap();
                xs[k][0] > 1.2
            })
            .count() as f64
            / s.len() as f64;
        assert!(violating <= d.slack + 0.02, "step {k}: {violating} > {} + 0.02", d.slack);
    }
}

#[test]
fn warm_start_shift() {
    let prev = vec![vec![1.0], vec![2.0], vec![3.0]];
    assert_eq!(shift_warm_start(&prev), vec![vec![2.0], vec![3.0], vec![3.0]]);
    let p = linear_problem(2);
    assert_eq!(initial_inputs(&p), vec![vec![1.0]; 3]);
    let mut both = p.clone();
    both.input_lower = vec![Some(-1.0)];
    assert_eq!(initial_inputs(&both), vec![vec![0.5]; 3]);
}

#[test]
fn empty_input_box_is_infeasible() {
    let m = LinearFirstOrder;
    let mut p = linear_problem(2);
    p.input_lower = vec![Some(3.0)];
    let s = linear_scenarios(2, 2, 0, 1.0);
    let r = control_action(&m, &s, &[0.0], &p, &ContinuationState::default(), None);
    assert!(matches!(r, Err(crate::error::SolverError::Infeasible(_))));
}

#[test]
fn max_iterations_returns_flagged_best_so_far() {
    let m = LinearFirstOrder;
    let p = linear_problem(5);
    let s = linear_scenarios(10, 5, 1, 1.0);
    let cont = ContinuationState { max_iter: 3, ..Default::default() };
    let d = control_action(&m, &s, &[0.0], &p, &cont, None).unwrap();
    assert_eq!(d.status, SolveStatus::MaxIterations);
    assert_eq!(d.iterations, 3);
    assert!(p.input_in_box(&d.inputs[0]));
}

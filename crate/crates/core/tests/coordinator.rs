mod common;

use common::model;
use dcc_core::cmdp::{build_cmdp, ConstraintVector};
use dcc_core::coordinator::{
    assemble_gradient, evaluate_agent, evaluate_triple, run_dcc, run_dcc_on, theta_step, AgentMemory, Backend,
    CouplingMode, DccConfig, GradientEstimate, SlowSchedule, Triple, TripleOptions,
};
use dcc_core::lp::solve_cmdp_lp;
use dcc_core::ql::TrainConfig;
use dcc_core::DccError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn triple(base: f64, local: f64, coupling: f64, eps: f64) -> Triple {
    Triple { base, local, coupling, eps }
}

fn retrain() -> TripleOptions {
    TripleOptions {
        lambda_shortcut: false,
        coupling: CouplingMode::Retrain,
    }
}

#[test]
fn gradient_arithmetic() {
    let g = assemble_gradient(&[triple(1.0, 0.9, 1.1, 0.1), triple(2.0, 1.8, 2.3, 0.1)]).unwrap();
    for (got, want) in g.local.iter().zip([-1.0, -2.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in g.coupling.iter().zip([1.0, 3.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in g.gradient.iter().zip([2.0, -1.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn zero_coupling_gives_local_gradient() {
    let g = assemble_gradient(&[triple(1.0, 0.5, 1.0, 0.5), triple(3.0, 4.0, 3.0, 0.5)]).unwrap();
    assert_eq!(g.gradient, g.local);
}

#[test]
fn mismatched_eps_is_a_contract_violation() {
    let err = assemble_gradient(&[triple(1.0, 0.9, 1.1, 0.1), triple(2.0, 1.8, 2.3, 0.2)]).unwrap_err();
    assert!(matches!(err, DccError::Contract(_)));
}

fn estimate(gradient: Vec<f64>) -> GradientEstimate {
    GradientEstimate {
        local: gradient.clone(),
        coupling: vec![0.0; gradient.len()],
        gradient,
    }
}

#[test]
fn theta_step_examples() {
    let s = SlowSchedule::default();
    let theta = ConstraintVector::new(vec![1.0, 2.0], 20.0).unwrap();
    assert_eq!(theta_step(&theta, &estimate(vec![0.0, 0.0]), 0, &s).unwrap(), theta);

    let zero = ConstraintVector::zeros(2, 20.0).unwrap();
    let moved = theta_step(&zero, &estimate(vec![-1.0, -2.0]), 0, &s).unwrap();
    assert!(moved.values().iter().all(|&t| t > 0.0 && t < 20.0));
    assert!((moved.get(1) - 0.5).abs() < 1e-12);

    let high = ConstraintVector::new(vec![19.9, 0.1], 20.0).unwrap();
    let clamped = theta_step(&high, &estimate(vec![-10.0, 10.0]), 0, &s).unwrap();
    assert_eq!(clamped.values(), &[20.0, 0.0]);
}

#[test]
fn decaying_schedule_meets_the_series_conditions() {
    assert!(SlowSchedule::satisfies_step_conditions());
    let s = SlowSchedule {
        constant: false,
        ..SlowSchedule::default()
    };
    // partial sums: sum alpha_n grows like ln n, sum (alpha_n / c_n)^2 converges
    let partial = |n: usize| -> (f64, f64) {
        (0..n).fold((0.0, 0.0), |(a, r), k| {
            let (al, c) = (s.step(k), s.scale(k, 20.0));
            (a + al, r + (al / c).powi(2))
        })
    };
    let (a1, r1) = partial(10_000);
    let (a2, r2) = partial(1_000_000);
    assert!(a2 - a1 > 0.25 * 4.0);
    assert!(r2 - r1 < 1e-2 * r1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..50 {
        let e = s.sample_eps(n, 20.0, &mut rng);
        assert!(e >= s.scale(n, 20.0) / 10.0);
    }
}

fn small() -> dcc_core::cmdp::TabularCmdp {
    build_cmdp(&model(4, 3, (0, 1), (1, 2), 1.0), 0.0, 0.0).unwrap()
}

fn quick() -> Backend {
    Backend::QLearning(TrainConfig {
        budget: 4_000,
        outer_iters: 4,
        calibration_rollouts: 32,
        ..TrainConfig::default()
    })
}

#[test]
fn zero_perturbation_gives_three_equal_values() {
    let c = small();
    let theta = ConstraintVector::new(vec![3.0, 2.0], c.theta_max()).unwrap();
    let t = evaluate_triple(&c, 0, &theta, 0.0, &quick(), &AgentMemory::default(), 11, retrain()).unwrap();
    assert_eq!(t.triple.base, t.triple.local);
    assert_eq!(t.triple.base, t.triple.coupling);
}

#[test]
fn masked_base_never_offloads() {
    let c = small();
    let theta = ConstraintVector::new(vec![0.0, 2.0], c.theta_max()).unwrap();
    let t = evaluate_triple(&c, 0, &theta, 0.05, &quick(), &AgentMemory::default(), 5, retrain()).unwrap();
    assert_eq!(t.base.k, 0.0);
    assert!(t.local.is_some() && t.coupling.is_some());
}

#[test]
fn perturbation_past_theta_max_is_rejected() {
    let c = small();
    let tm = c.theta_max();
    let theta = ConstraintVector::new(vec![tm - 0.01, 0.0], tm).unwrap();
    let err = evaluate_triple(&c, 0, &theta, 0.1, &Backend::Lp, &AgentMemory::default(), 0, retrain()).unwrap_err();
    assert!(matches!(err, DccError::Domain(_)));
}

#[test]
fn lp_triple_matches_direct_solves() {
    let c = small();
    let (ti, tm, eps) = (2.0, 3.0, 0.01);
    let theta = ConstraintVector::new(vec![ti, tm], c.theta_max()).unwrap();
    let t = evaluate_triple(&c, 0, &theta, eps, &Backend::Lp, &AgentMemory::default(), 0, retrain()).unwrap();
    let solve = |a: f64, b: f64| {
        let occ = solve_cmdp_lp(&c.retarget(a, b).unwrap(), a).unwrap();
        occ.objective + occ.lambda * (occ.cost - a)
    };
    assert!((t.triple.base - solve(ti, tm)).abs() < 1e-9);
    assert!((t.triple.local - solve(ti + eps, tm)).abs() < 1e-9);
    assert!((t.triple.coupling - solve(ti, tm + eps)).abs() < 1e-9);
}

#[test]
fn fixed_policy_coupling_matches_lp_resolve_to_first_order() {
    let c = small();
    let (ti, tm, eps) = (2.0, 3.0, 1e-4);
    let theta = ConstraintVector::new(vec![ti, tm], c.theta_max()).unwrap();
    let opts = TripleOptions {
        lambda_shortcut: false,
        coupling: CouplingMode::FixedPolicy,
    };
    let fixed = evaluate_triple(&c, 0, &theta, eps, &Backend::Lp, &AgentMemory::default(), 0, opts).unwrap();
    let resolved = evaluate_triple(&c, 0, &theta, eps, &Backend::Lp, &AgentMemory::default(), 0, retrain()).unwrap();
    assert!(fixed.coupling.is_none());
    let (a, b) = ((fixed.triple.coupling - fixed.triple.base) / eps, (resolved.triple.coupling - resolved.triple.base) / eps);
    assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
}

/// Sum of the agents' LP Lagrangian values at the vector `theta`.
fn summed_value(cmdps: &[dcc_core::cmdp::TabularCmdp], theta: &[f64]) -> f64 {
    let total: f64 = theta.iter().sum();
    cmdps
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let e = evaluate_agent(c, theta[i], total - theta[i], &Backend::Lp, &AgentMemory::default(), 0).unwrap();
            e.j_lagrangian
        })
        .sum()
}

#[test]
fn lp_gradient_matches_full_vector_differences() {
    let cmdps = vec![
        build_cmdp(&model(4, 3, (0, 1), (1, 2), 1.0), 0.0, 0.0).unwrap(),
        build_cmdp(&model(3, 3, (1, 1), (1, 3), 1.0), 0.0, 0.0).unwrap(),
    ];
    let tm = cmdps[0].theta_max();
    let theta = ConstraintVector::new(vec![2.5, 4.0], tm).unwrap();
    let eps = 1e-5;
    let triples: Vec<Triple> = (0..2)
        .map(|i| {
            evaluate_triple(&cmdps[i], i, &theta, eps, &Backend::Lp, &AgentMemory::default(), 0, retrain())
                .unwrap()
                .triple
        })
        .collect();
    let g = assemble_gradient(&triples).unwrap();
    let h = 1e-4;
    for k in 0..2 {
        let mut up = theta.values().to_vec();
        let mut down = up.clone();
        up[k] += h;
        down[k] -= h;
        let fd = (summed_value(&cmdps, &up) - summed_value(&cmdps, &down)) / (2.0 * h);
        assert!((g.gradient[k] - fd).abs() < 1e-3 * fd.abs().max(1.0), "{k}: {} vs {fd}", g.gradient[k]);
    }
}

#[test]
fn single_agent_reaches_the_grid_optimum() {
    let c = build_cmdp(&model(4, 3, (0, 1), (1, 2), 1.0), 0.0, 0.0).unwrap();
    let tm = c.theta_max();
    let best = (0..=40)
        .map(|k| {
            let t = tm * k as f64 / 40.0;
            solve_cmdp_lp(&c.retarget(t, 0.0).unwrap(), t).unwrap().objective
        })
        .fold(f64::INFINITY, f64::min);
    let cfg = DccConfig {
        slow_iters: 100,
        backend: Backend::Lp,
        ..DccConfig::default()
    };
    let report = run_dcc_on(&[c], &cfg, 7).unwrap();
    let last = report.final_record().unwrap();
    assert!(last.j_lagrangian[0] <= best * 1.02, "{} vs {best}", last.j_lagrangian[0]);
}

#[test]
fn dcc_is_deterministic_and_projected() {
    let models = vec![model(4, 3, (0, 1), (1, 2), 1.0), model(3, 3, (1, 1), (1, 3), 1.0)];
    let cfg = DccConfig {
        slow_iters: 2,
        backend: quick(),
        ..DccConfig::default()
    };
    let a = run_dcc(&models, &cfg, 21).unwrap();
    let b = run_dcc(&models, &cfg, 21).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records.len(), 3);
    assert!(a.records[0].offload_frequency == 0.0);
    for r in &a.records {
        assert!(r.theta.iter().all(|&t| (0.0..=a.theta_max).contains(&t)));
    }
}

proptest! {
    #[test]
    fn theta_step_stays_in_the_box(
        theta in proptest::collection::vec(0.0f64..20.0, 1..6),
        g in proptest::collection::vec(-100.0f64..100.0, 6),
        n in 0usize..50,
        constant in any::<bool>(),
    ) {
        let s = SlowSchedule { constant, ..SlowSchedule::default() };
        let t = ConstraintVector::new(theta.clone(), 20.0).unwrap();
        let next = theta_step(&t, &estimate(g[..theta.len()].to_vec()), n, &s).unwrap();
        prop_assert!(next.values().iter().all(|&v| (0.0..=20.0).contains(&v)));
    }
}

#![allow(clippy::needless_range_loop)]

mod common;

use common::{greedy_of, model, small_instances, two_state_cmdp, value_iteration};
use dcc_core::cmdp::{build_cmdp, evaluate_policy};
use dcc_core::env::Action;
use dcc_core::lp::solve_cmdp_lp;
use dcc_core::ql::{lambda_update, q_update, train_constrained, QTable, TrainConfig};
use dcc_core::DccError;
use proptest::prelude::*;

fn oracle_config() -> TrainConfig {
    TrainConfig {
        budget: 2_000_000,
        outer_iters: 50,
        learning_rate: 0.2,
        epsilon: 0.2,
        epsilon_decay: 1.0,
        eta0: 1.0,
        ..TrainConfig::default()
    }
}

#[test]
fn unit_rate_overwrites_after_one_visit() {
    let cmdp = two_state_cmdp(0.9);
    let mut q = QTable::new(2, 1.0, 0.0, 1.0).unwrap();
    q_update(&mut q, &cmdp, 0, Action::Wait, 3.0, 0, false);
    assert_eq!(q.get(0, Action::Wait), 3.0);
}

#[test]
fn exhaustive_sweeps_match_value_iteration() {
    let cmdp = two_state_cmdp(0.9);
    let oracle = value_iteration(&cmdp, 0.0, false);
    let mut q = QTable::new(2, 0.5, 0.0, 1.0).unwrap();
    for _ in 0..2000 {
        for s in 0..2 {
            for a in [Action::Wait, Action::LocalProcess] {
                let next = cmdp.kernel().row(s, a).next().unwrap().0;
                q_update(&mut q, &cmdp, s, a, cmdp.reward(s, a), next, false);
            }
        }
    }
    for s in 0..2 {
        for a in [Action::Wait, Action::LocalProcess] {
            assert!((q.get(s, a) - oracle[s][a.index()]).abs() < 1e-6, "{s} {a:?}");
        }
    }
    // state 0 should switch to the cheaper state: 3 + 0.9 * 10
    assert!((oracle[0][Action::LocalProcess.index()] - 12.0).abs() < 1e-9);
}

#[test]
fn myopic_limit_tracks_immediate_reward() {
    let cmdp = two_state_cmdp(1e-9);
    let mut q = QTable::new(2, 0.5, 0.0, 1.0).unwrap();
    q.set(1, Action::Wait, 50.0);
    q.set(1, Action::LocalProcess, 50.0);
    for _ in 0..60 {
        q_update(&mut q, &cmdp, 0, Action::LocalProcess, 3.0, 1, false);
    }
    assert!((q.get(0, Action::LocalProcess) - 3.0).abs() < 1e-6);
}

#[test]
fn zero_threshold_never_offloads() {
    let m = model(4, 3, (0, 1), (1, 2), 1.0);
    let cmdp = build_cmdp(&m, 0.0, 5.0).unwrap();
    let cfg = TrainConfig { budget: 50_000, ..TrainConfig::default() };
    let out = train_constrained(&cmdp, 0.0, &cfg, None, 3).unwrap();
    for s in 0..cmdp.len() {
        assert_eq!(out.policy.prob(s, Action::Offload), 0.0);
    }
    assert_eq!(out.k, 0.0);
    assert_eq!(out.lambda, 0.0);
}

#[test]
fn slack_threshold_matches_unconstrained_optimum() {
    for (i, (m, others)) in small_instances(21, 3, 1.0, 200).into_iter().enumerate() {
        let theta = m.theta_max();
        let cmdp = build_cmdp(&m, theta, others).unwrap();
        let out = train_constrained(&cmdp, theta, &oracle_config(), None, i as u64).unwrap();
        let vi = evaluate_policy(&cmdp, &greedy_of(&cmdp, &value_iteration(&cmdp, 0.0, true))).unwrap();
        assert!(out.lambda < 1e-9, "lambda {}", out.lambda);
        assert!((out.j - vi.j).abs() / vi.j < 0.02, "ql {} vi {}", out.j, vi.j);
    }
}

#[test]
fn binding_threshold_is_met() {
    let m = model(4, 3, (0, 1), (1, 2), 1.0);
    let theta = 0.3 * m.theta_max();
    let cmdp = build_cmdp(&m, theta, 4.0).unwrap();
    let lp = solve_cmdp_lp(&cmdp, theta).unwrap();
    assert!(lp.binding());
    let out = train_constrained(&cmdp, theta, &oracle_config(), None, 8).unwrap();
    assert!((out.k - theta).abs() <= 0.05 * m.theta_max(), "K {} theta {theta}", out.k);
    assert!((out.j - lp.objective).abs() / lp.objective < 0.02);
}

#[test]
fn same_seed_same_q_table() {
    let m = model(4, 3, (0, 1), (1, 2), 1.0);
    let cmdp = build_cmdp(&m, 6.0, 4.0).unwrap();
    let cfg = TrainConfig { budget: 40_000, ..TrainConfig::default() };
    let a = train_constrained(&cmdp, 6.0, &cfg, None, 17).unwrap();
    let b = train_constrained(&cmdp, 6.0, &cfg, None, 17).unwrap();
    assert_eq!(a.q, b.q);
    assert_eq!(a.history, b.history);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn budget_below_one_iteration_is_rejected() {
    let m = model(3, 2, (1, 1), (1, 1), 1.0);
    let cmdp = build_cmdp(&m, 6.0, 0.0).unwrap();
    let cfg = TrainConfig { budget: 3, outer_iters: 25, ..TrainConfig::default() };
    assert!(matches!(train_constrained(&cmdp, 6.0, &cfg, None, 0), Err(DccError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multiplier_stays_nonnegative(lambda in 0.0f64..10.0, eta in 0.0f64..5.0, k in 0.0f64..20.0, theta in 0.0f64..20.0) {
        let next = lambda_update(lambda, eta, k, theta).unwrap();
        prop_assert!(next >= 0.0);
        if k == theta {
            prop_assert_eq!(next, lambda);
        }
    }

    #[test]
    fn shaping_never_raises_cost(seed in 0u64..1000, l1 in 0.0f64..3.0, dl in 0.0f64..3.0) {
        let (m, others) = small_instances(seed, 1, 1.0, 120).pop().unwrap();
        let cmdp = build_cmdp(&m, 10.0, others).unwrap();
        let k = |lambda: f64| {
            let q = value_iteration(&cmdp, lambda, true);
            evaluate_policy(&cmdp, &greedy_of(&cmdp, &q)).unwrap().k
        };
        prop_assert!(k(l1 + dl) <= k(l1) + 1e-9);
    }
}

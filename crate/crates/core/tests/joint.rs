mod common;

use common::{model, small_instances};
use dcc_core::cmdp::{build_cmdp, evaluate_policy, offload_probability, stationary_distribution, AgentPolicy};
use dcc_core::env::Action;
use dcc_core::joint::{joint_value, poisson_binomial, simulate_joint, Member};
use dcc_core::lp::{policy_from_occupancy, solve_cmdp_lp};
use dcc_core::rng::{stream, Stream};
use proptest::prelude::*;

fn brute_force_count(probs: &[f64]) -> Vec<f64> {
    let n = probs.len();
    let mut dist = vec![0.0; n + 1];
    for mask in 0u32..(1 << n) {
        let mut w = 1.0;
        for (i, &p) in probs.iter().enumerate() {
            w *= if mask & (1 << i) != 0 { p } else { 1.0 - p };
        }
        dist[mask.count_ones() as usize] += w;
    }
    dist
}

proptest! {
    #[test]
    fn poisson_binomial_matches_enumeration(probs in proptest::collection::vec(0.0f64..=1.0, 0..9)) {
        let fast = poisson_binomial(&probs);
        let slow = brute_force_count(&probs);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_agent_matches_policy_evaluation() {
    let m = model(4, 3, (0, 1), (1, 2), 2.0);
    let cmdp = build_cmdp(&m, 5.0, 0.0).unwrap();
    let policy = policy_from_occupancy(&cmdp, &solve_cmdp_lp(&cmdp, 5.0).unwrap()).unwrap();
    let exact = evaluate_policy(&cmdp, &policy).unwrap();
    let joint = joint_value(&[Member::new(&cmdp, &policy)], 1e-14).unwrap();
    assert!((joint.reward - exact.j).abs() < 1e-9 * exact.j);
    assert!((joint.costs[0] - exact.k).abs() < 1e-9);
    assert!((joint.offload_frequency - exact.k / m.theta_max()).abs() < 1e-12);
}

#[test]
fn linear_penalty_decomposes_exactly_at_stationarity() {
    let instances = small_instances(4, 3, 1.0, 150);
    let cmdps: Vec<_> = instances.iter().map(|(m, _)| build_cmdp(m, 6.0, 8.0).unwrap()).collect();
    let policies: Vec<AgentPolicy> = cmdps
        .iter()
        .map(|c| policy_from_occupancy(c, &solve_cmdp_lp(c, 6.0).unwrap()).unwrap())
        .collect();
    let mus: Vec<Vec<f64>> = cmdps.iter().zip(&policies).map(|(c, p)| stationary_distribution(c, p)).collect();
    let freqs: Vec<f64> = policies.iter().zip(&mus).map(|(p, mu)| offload_probability(p, mu)).collect();
    let mut approx = 0.0;
    for i in 0..3 {
        let others: f64 = (0..3).filter(|&j| j != i).map(|j| freqs[j]).sum();
        let local = cmdps[i].with_expected_others(6.0, others).unwrap().with_initial(mus[i].clone()).unwrap();
        approx += evaluate_policy(&local, &policies[i]).unwrap().j;
    }
    let members: Vec<Member> = (0..3).map(|i| Member::new(&cmdps[i], &policies[i]).starting_from(&mus[i])).collect();
    let exact = joint_value(&members, 1e-16).unwrap();
    assert!((exact.reward - approx).abs() <= 1e-9 * approx, "{} vs {approx}", exact.reward);
}

#[test]
fn simulation_agrees_with_exact_evaluation() {
    let m1 = model(4, 3, (0, 1), (1, 2), 2.0);
    let m2 = model(3, 2, (1, 1), (1, 3), 2.0);
    let c1 = build_cmdp(&m1, 0.0, 0.0).unwrap();
    let c2 = build_cmdp(&m2, 0.0, 0.0).unwrap();
    let p1 = AgentPolicy::deterministic(&c1, |_| Action::Offload);
    let p2 = policy_from_occupancy(&c2, &solve_cmdp_lp(&c2.retarget(8.0, 8.0).unwrap(), 8.0).unwrap()).unwrap();
    let members = [Member::new(&c1, &p1), Member::new(&c2, &p2)];
    let exact = joint_value(&members, 1e-14).unwrap();
    let mut rng = stream(5, 0, Stream::Joint);
    let est = simulate_joint(&[m1, m2], &members, 4000, 400, &mut rng).unwrap();
    assert!((est.mean - exact.reward).abs() < 4.0 * est.std_error + 1e-6, "{est:?} vs {}", exact.reward);
}

#[test]
fn mismatched_agents_are_rejected() {
    let m1 = model(4, 3, (0, 1), (1, 2), 2.0);
    let m2 = model(4, 3, (0, 1), (1, 2), 1.0);
    let c1 = build_cmdp(&m1, 0.0, 0.0).unwrap();
    let c2 = build_cmdp(&m2, 0.0, 0.0).unwrap();
    let p = AgentPolicy::constant(&c1, Action::Wait);
    assert!(joint_value(&[Member::new(&c1, &p), Member::new(&c2, &p)], 1e-9).is_err());
    assert!(joint_value(&[], 1e-9).is_err());
}

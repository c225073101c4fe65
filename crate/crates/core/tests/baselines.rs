mod common;

use common::{greedy_of, model, value_iteration};
use dcc_core::baselines::{train_iql, train_iql_common, IqlAgent, IqlConfig};
use dcc_core::cmdp::{build_cmdp, discounted_value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short() -> IqlConfig {
    IqlConfig {
        joint_steps: 6_000,
        episode_len: 1_000,
        checkpoints: 3,
        ..IqlConfig::default()
    }
}

#[test]
fn single_agent_signals_coincide() {
    let models = vec![model(4, 3, (0, 1), (1, 2), 1.0)];
    let a = train_iql(&models, &short(), 9).unwrap();
    let b = train_iql_common(&models, &short(), 9).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.signal_variance, b.signal_variance);
}

#[test]
fn reruns_are_identical() {
    let models = vec![model(4, 3, (0, 1), (1, 2), 1.0), model(3, 3, (1, 1), (1, 3), 1.0)];
    let a = train_iql(&models, &short(), 4).unwrap();
    let b = train_iql(&models, &short(), 4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.records.len(), 4);
    assert_eq!(a.records.last().unwrap().steps, 2 * 6_000);
}

#[test]
fn common_signal_is_noisier() {
    let sets = dcc_core::harness::InstanceSets::default();
    let models = dcc_core::harness::sample_instances(&sets, 10, 2).unwrap();
    let cfg = IqlConfig {
        joint_steps: 4_000,
        ..IqlConfig::default()
    };
    let selfish = train_iql(&models, &cfg, 2).unwrap().signal_variance.unwrap();
    let shared = train_iql_common(&models, &cfg, 2).unwrap().signal_variance.unwrap();
    assert!(shared > selfish, "{shared} <= {selfish}");
}

/// Against another device that offloads with a fixed probability `q`, the
/// learner faces a stationary MDP whose offload penalty is `q` on average
/// (linear penalty), so its greedy policy should approach the value-iteration
/// best response.
#[test]
fn best_response_to_a_fixed_other() {
    let q = 0.4;
    let m = model(4, 3, (0, 1), (1, 3), 1.0);
    let base = build_cmdp(&m, 0.0, 0.0).unwrap();
    let induced = base.with_expected_others(0.0, q).unwrap();
    let cfg = IqlConfig {
        learning_rate: 0.1,
        epsilon: 0.2,
        epsilon_decay: 1.0,
        ..IqlConfig::default()
    };
    let mut agent = IqlAgent::new(&base, &cfg, 17, 0).unwrap();
    let mut other = ChaCha8Rng::seed_from_u64(99);
    for step in 0..400_000 {
        if step % 2_000 == 0 && step > 0 {
            agent.restart();
        }
        let s = agent.state();
        let a = agent.act();
        let others = if other.gen::<f64>() < q { 1.0 } else { 0.0 };
        let penalty = if a.is_crowd() { others } else { 0.0 };
        agent.learn(base.utility(s) + penalty);
    }
    let optimum = discounted_value(&induced, &greedy_of(&induced, &value_iteration(&induced, 0.0, true))).unwrap().0;
    let learned = discounted_value(&induced, &agent.greedy_policy()).unwrap().0;
    assert!(learned <= optimum * 1.02, "{learned} vs {optimum}");
}

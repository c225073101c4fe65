use dcc_core::cmdp::*;
use dcc_core::DccError;
use dcc_core::env::{Action, DeviceModel, MarkovChain};

fn tiny() -> DeviceModel {
    DeviceModel::new(2, 1, MarkovChain::constant(1), MarkovChain::constant(1), 1.0, 0.95).unwrap()
}

#[test]
fn tiny_instance_has_four_states() {
    let cmdp = build_cmdp(&tiny(), 0.0, 0.0).unwrap();
    assert_eq!(cmdp.len(), 4);
    assert!(cmdp.states().iter().all(|s| !s.pending()));
}

#[test]
fn constant_reward_value_is_geometric_series() {
    // only AoI 1 with a full battery is visited when always offloading
    let cmdp = build_cmdp(&tiny(), 0.0, 0.0).unwrap();
    let pol = AgentPolicy::constant(&cmdp, Action::Offload);
    let (j, k) = discounted_value(&cmdp, &pol).unwrap();
    assert!((j - 20.0).abs() < 1e-9);
    assert!((k - 20.0).abs() < 1e-9);
}

#[test]
fn never_offloading_costs_nothing() {
    let cmdp = build_cmdp(&tiny(), 0.0, 0.0).unwrap();
    let pol = AgentPolicy::constant(&cmdp, Action::Wait);
    assert_eq!(discounted_value(&cmdp, &pol).unwrap().1, 0.0);
}

#[test]
fn bound_examples() {
    assert_eq!(decomposition_error_bound(&[0.3, 0.5, 0.9], 0.95, 1.0).unwrap(), 0.0);
    let b = decomposition_error_bound(&[0.2, 0.2, 0.2], 0.95, 2.0).unwrap();
    assert!((b - 7.68).abs() < 1e-9);
    assert_eq!(decomposition_error_bound(&[0.0, 0.0], 0.95, 3.0).unwrap(), 0.0);
    assert!(matches!(decomposition_error_bound(&[0.2], 0.95, 2.0), Err(DccError::Domain(_))));
}

#[test]
fn state_cap_is_enforced() {
    let opts = BuildOptions {
        state_cap: 3,
        ..BuildOptions::default()
    };
    assert!(matches!(build_cmdp_with(&tiny(), 0.0, 0.0, &opts), Err(DccError::Size { states: 4, cap: 3 })));
}

#[test]
fn constraint_vector_validation() {
    assert!(ConstraintVector::new(vec![0.0, 21.0], 20.0).is_err());
    let t = ConstraintVector::projected(vec![-1.0, 3.0, 25.0], 20.0).unwrap();
    assert_eq!(t.values(), &[0.0, 3.0, 20.0]);
    assert_eq!(t.others(1), 20.0);
}

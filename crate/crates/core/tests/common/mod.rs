#![allow(dead_code, clippy::needless_range_loop)]

use dcc_core::cmdp::{build_cmdp, AgentPolicy, CmdpDump, TabularCmdp};
use dcc_core::env::{check_crowd_incentive, Action, DeviceModel, DeviceState, MarkovChain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model(m: u32, b: i32, h: (i32, i32), c: (i32, i32), alpha: f64) -> DeviceModel {
    DeviceModel::new(
        m,
        b,
        MarkovChain::birth_death(h.0, h.1).unwrap(),
        MarkovChain::birth_death(c.0, c.1).unwrap(),
        alpha,
        0.95,
    )
    .unwrap()
}

/// Random small models that pass the crowd-incentive check, paired with a
/// random coupling `theta_{-i}`.
pub fn small_instances(seed: u64, count: usize, alpha: f64, max_states: usize) -> Vec<(DeviceModel, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let m = rng.gen_range(3..=5u32);
        let b = rng.gen_range(2..=4i32);
        let hmin = rng.gen_range(0..=1);
        let hmax = (hmin + rng.gen_range(0..=1)).max(1);
        let cmax = rng.gen_range(1..=3);
        let model = model(m, b, (hmin, hmax), (1, cmax), alpha);
        if !check_crowd_incentive(&model) {
            continue;
        }
        let others = rng.gen_range(0.0..6.0);
        if build_cmdp(&model, 0.0, others).unwrap().len() > max_states {
            continue;
        }
        out.push((model, others));
    }
    out
}

/// Two states with Wait and LocalProcess only; Wait stays, LocalProcess
/// switches. Utilities 3 and 1.
pub fn two_state_cmdp(gamma: f64) -> TabularCmdp {
    let st = |aoi| DeviceState { aoi, battery: 1, harvest: 0, cost: 1 };
    let dump = CmdpDump {
        states: vec![st(1), st(2)],
        kernel: vec![
            (0, Action::Wait, 0, 1.0),
            (0, Action::LocalProcess, 1, 1.0),
            (1, Action::Wait, 1, 1.0),
            (1, Action::LocalProcess, 0, 1.0),
        ],
        reward: vec![[Some(3.0), Some(3.0), None], [Some(1.0), Some(1.0), None]],
        cost: vec![[Some(0.0), Some(0.0), None], [Some(0.0), Some(0.0), None]],
        beta: vec![1.0, 0.0],
        discount: gamma,
        alpha: 1.0,
        threshold: 0.0,
        expected_others: 0.0,
    };
    TabularCmdp::from_dump(&dump).unwrap()
}

/// Q of the shaped reward `r + lambda c` by value iteration to 1e-12.
pub fn value_iteration(cmdp: &TabularCmdp, lambda: f64, allow_crowd: bool) -> Vec<[f64; 3]> {
    let n = cmdp.len();
    let g = cmdp.discount();
    let mut v = vec![0.0; n];
    let mut q = vec![[f64::INFINITY; 3]; n];
    loop {
        for s in 0..n {
            for a in cmdp.actions(s) {
                if a.is_crowd() && !allow_crowd {
                    continue;
                }
                let ev: f64 = cmdp.kernel().row(s, a).map(|(t, p)| p * v[t]).sum();
                q[s][a.index()] = cmdp.reward(s, a) + lambda * cmdp.cost(s, a) + g * ev;
            }
        }
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let best = q[s].iter().cloned().fold(f64::INFINITY, f64::min);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < 1e-12 {
            return q;
        }
    }
}

pub fn greedy_of(cmdp: &TabularCmdp, q: &[[f64; 3]]) -> AgentPolicy {
    AgentPolicy::deterministic(cmdp, |s| {
        let mut best = Action::Wait;
        for a in cmdp.actions(s) {
            if q[s][a.index()] < q[s][best.index()] {
                best = a;
            }
        }
        best
    })
}

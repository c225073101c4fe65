//! Browser demo bindings. Every export takes plain numbers and returns a
//! JSON string, so the page needs no generated types.

use dcc_core::cmdp::{build_cmdp, decomposition_error_bound};
use dcc_core::coordinator::{run_dcc, Backend, DccConfig};
use dcc_core::env::{DeviceModel, MarkovChain};
use dcc_core::harness::{sample_instances, InstanceSets};
use dcc_core::lp::solve_cmdp_lp;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct LpView {
    states: usize,
    theta_max: f64,
    objective: f64,
    cost: f64,
    lambda: f64,
    binding: bool,
    /// Discounted occupancy of each action: wait, local, offload.
    action_mass: [f64; 3],
}

/// Solves one device's constrained problem exactly.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn solve_device(
    aoi_cap: u32,
    battery_cap: i32,
    max_harvest: i32,
    max_cost: i32,
    alpha: f64,
    theta_i: f64,
    theta_minus_i: f64,
) -> Result<String, JsValue> {
    let model = DeviceModel::new(
        aoi_cap,
        battery_cap,
        MarkovChain::birth_death(0, max_harvest).map_err(js_err)?,
        MarkovChain::birth_death(1, max_cost).map_err(js_err)?,
        alpha,
        0.95,
    )
    .map_err(js_err)?;
    let cmdp = build_cmdp(&model, theta_i, theta_minus_i).map_err(js_err)?;
    if cmdp.len() > 2_000 {
        return Err(JsValue::from_str("instance too large for the browser demo (2000 states)"));
    }
    let occ = solve_cmdp_lp(&cmdp, theta_i).map_err(js_err)?;
    let mut action_mass = [0.0; 3];
    for row in &occ.rho {
        for (m, r) in action_mass.iter_mut().zip(row) {
            *m += r;
        }
    }
    to_json(&LpView {
        states: cmdp.len(),
        theta_max: cmdp.theta_max(),
        objective: occ.objective,
        cost: occ.cost,
        lambda: occ.lambda,
        binding: occ.binding(),
        action_mass,
    })
}

/// Error allowance of the decomposed reward for per-step offload
/// probabilities given as a comma-separated list.
#[wasm_bindgen]
pub fn decomposition_bound(freqs: &str, alpha: f64) -> Result<f64, JsValue> {
    let f: Vec<f64> = freqs
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(js_err)?;
    decomposition_error_bound(&f, 0.95, alpha).map_err(js_err)
}

#[derive(Serialize)]
struct DccView {
    theta: Vec<Vec<f64>>,
    joint_reward: Vec<f64>,
    offload_frequency: Vec<f64>,
}

/// Slow-timescale iterations on small sampled devices, each agent solved
/// exactly.
#[wasm_bindgen]
pub fn coordinate(n_agents: usize, iterations: usize, alpha: f64, seed: u64) -> Result<String, JsValue> {
    if !(1..=12).contains(&n_agents) || iterations > 200 {
        return Err(JsValue::from_str("use 1 to 12 agents and at most 200 iterations"));
    }
    let sets = InstanceSets {
        max_h: vec![1, 2],
        max_c: vec![2, 3],
        aoi_cap: 4,
        battery_cap: 3,
        alpha,
        ..InstanceSets::default()
    };
    let models = sample_instances(&sets, n_agents, seed).map_err(js_err)?;
    let cfg = DccConfig {
        slow_iters: iterations,
        backend: Backend::Lp,
        ..DccConfig::default()
    };
    let report = run_dcc(&models, &cfg, seed).map_err(js_err)?;
    to_json(&DccView {
        theta: report.records.iter().map(|r| r.theta.clone()).collect(),
        joint_reward: report.records.iter().map(|r| r.joint_reward).collect(),
        offload_frequency: report.records.iter().map(|r| r.offload_frequency).collect(),
    })
}

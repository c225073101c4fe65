//! Per-agent constrained MDP: tabular enumeration of one device, exact
//! policy evaluation, stationary distributions and the decomposition error
//! bound.
//!
//! Constraint thresholds `theta` live in discounted units, `0..=theta_max`
//! with `theta_max = 1 / (1 - gamma)`. The expected number of other
//! offloaders entering the approximated reward is the frequency
//! `theta_minus_i / theta_max`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{congestion, crowd_cost, local_utility, Action, DeviceModel, DeviceState};
use crate::error::{DccError, Result};

pub const DEFAULT_STATE_CAP: usize = 100_000;

/// Largest system solved with a dense LU factorization.
const DENSE_LIMIT: usize = 1500;

/// Dense lookup from `(aoi, battery, harvest, cost)` to the state index.
#[derive(Debug, Clone, PartialEq)]
pub struct StateIndex {
    aoi_len: usize,
    battery_min: i32,
    battery_len: usize,
    harvest_min: i32,
    harvest_len: usize,
    cost_min: i32,
    cost_len: usize,
    slots: Vec<u32>,
}

impl StateIndex {
    fn new(states: &[DeviceState]) -> Self {
        let span = |f: &dyn Fn(&DeviceState) -> i64| {
            let lo = states.iter().map(f).min().unwrap_or(0);
            let hi = states.iter().map(f).max().unwrap_or(0);
            (lo, (hi - lo + 1) as usize)
        };
        let aoi_len = states.iter().map(|s| s.aoi as usize).max().unwrap_or(0) + 1;
        let (bmin, blen) = span(&|s| s.battery as i64);
        let (hmin, hlen) = span(&|s| s.harvest as i64);
        let (cmin, clen) = span(&|s| s.cost as i64);
        let mut index = StateIndex {
            aoi_len,
            battery_min: bmin as i32,
            battery_len: blen,
            harvest_min: hmin as i32,
            harvest_len: hlen,
            cost_min: cmin as i32,
            cost_len: clen,
            slots: vec![u32::MAX; aoi_len * blen * hlen * clen],
        };
        for (i, s) in states.iter().enumerate() {
            let slot = index.slot(s).expect("state inside its own bounding box");
            index.slots[slot] = i as u32;
        }
        index
    }

    fn slot(&self, s: &DeviceState) -> Option<usize> {
        let a = s.aoi as usize;
        let b = s.battery.checked_sub(self.battery_min)?;
        let h = s.harvest.checked_sub(self.harvest_min)?;
        let c = s.cost.checked_sub(self.cost_min)?;
        if a >= self.aoi_len || b < 0 || h < 0 || c < 0 {
            return None;
        }
        let (b, h, c) = (b as usize, h as usize, c as usize);
        if b >= self.battery_len || h >= self.harvest_len || c >= self.cost_len {
            return None;
        }
        Some(((a * self.battery_len + b) * self.harvest_len + h) * self.cost_len + c)
    }

    pub fn get(&self, s: &DeviceState) -> Option<usize> {
        self.slot(s)
            .map(|k| self.slots[k])
            .filter(|&i| i != u32::MAX)
            .map(|i| i as usize)
    }
}

/// Sparse transition kernel, one row per `(state, action)` pair.
/// Inadmissible pairs have empty rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    row_ptr: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
}

impl Kernel {
    pub fn row(&self, s: usize, a: Action) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = s * 3 + a.index();
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.next[lo..hi].iter().zip(&self.prob[lo..hi]).map(|(&j, &p)| (j as usize, p))
    }

    pub fn nnz(&self) -> usize {
        self.prob.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, a: Action, rng: &mut R) -> usize {
        let r = s * 3 + a.index();
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for k in lo..hi {
            acc += self.prob[k];
            if u < acc {
                return self.next[k] as usize;
            }
        }
        self.next[hi - 1] as usize
    }
}

/// Where episodes start.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDistribution {
    /// `(1, B, min_H, min_C)`.
    #[default]
    FullBattery,
    /// Uniform over the enumerated states with a nonnegative battery.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub state_cap: usize,
    pub initial: InitialDistribution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            state_cap: DEFAULT_STATE_CAP,
            initial: InitialDistribution::FullBattery,
        }
    }
}

/// Tabular CMDP of one agent. The kernel and utilities are shared between
/// copies, so re-targeting to a different `theta` is cheap.
#[derive(Debug, Clone)]
pub struct TabularCmdp {
    states: Arc<Vec<DeviceState>>,
    index: Arc<StateIndex>,
    admissible: Arc<Vec<u8>>,
    kernel: Arc<Kernel>,
    utility: Arc<Vec<f64>>,
    beta: Arc<Vec<f64>>,
    discount: f64,
    alpha: f64,
    threshold: f64,
    others: f64,
    offload_penalty: f64,
}

/// Builds the CMDP of `model` for the threshold `theta_i` with the other
/// agents' budgets summing to `theta_minus_i` (both in discounted units).
pub fn build_cmdp(model: &DeviceModel, theta_i: f64, theta_minus_i: f64) -> Result<TabularCmdp> {
    build_cmdp_with(model, theta_i, theta_minus_i, &BuildOptions::default())
}

pub fn build_cmdp_with(model: &DeviceModel, theta_i: f64, theta_minus_i: f64, options: &BuildOptions) -> Result<TabularCmdp> {
    model.validate()?;
    let states = model.state_space();
    if states.len() > options.state_cap {
        return Err(DccError::Size {
            states: states.len(),
            cap: options.state_cap,
        });
    }
    let index = StateIndex::new(&states);
    let n = states.len();
    let mut row_ptr = Vec::with_capacity(3 * n + 1);
    let mut next = Vec::new();
    let mut prob = Vec::new();
    let mut admissible = Vec::with_capacity(n);
    row_ptr.push(0);
    for s in &states {
        let mut mask = 0u8;
        for a in Action::ALL {
            if model.admissible_actions(s).contains(&a) {
                mask |= 1 << a.index();
                let mut succ: Vec<(usize, f64)> = model
                    .transitions(s, a)?
                    .into_iter()
                    .map(|(t, p)| (index.get(&t).expect("closed state space"), p))
                    .collect();
                succ.sort_by_key(|&(j, _)| j);
                for (j, p) in succ {
                    next.push(j as u32);
                    prob.push(p);
                }
            }
            row_ptr.push(next.len());
        }
        admissible.push(mask);
    }
    let beta = match options.initial {
        InitialDistribution::FullBattery => {
            let mut beta = vec![0.0; n];
            beta[index.get(&model.initial_state()).expect("initial state enumerated")] = 1.0;
            beta
        }
        InitialDistribution::Uniform => {
            let count = states.iter().filter(|s| !s.pending()).count() as f64;
            states.iter().map(|s| if s.pending() { 0.0 } else { 1.0 / count }).collect()
        }
    };
    let utility = states.iter().map(local_utility).collect();
    let mut cmdp = TabularCmdp {
        states: Arc::new(states),
        index: Arc::new(index),
        admissible: Arc::new(admissible),
        kernel: Arc::new(Kernel { row_ptr, next, prob }),
        utility: Arc::new(utility),
        beta: Arc::new(beta),
        discount: model.discount,
        alpha: model.penalty_alpha,
        threshold: 0.0,
        others: 0.0,
        offload_penalty: 0.0,
    };
    cmdp.set_targets(theta_i, theta_minus_i)?;
    Ok(cmdp)
}

impl TabularCmdp {
    fn set_targets(&mut self, theta_i: f64, theta_minus_i: f64) -> Result<()> {
        if !(theta_i >= 0.0 && theta_i.is_finite()) {
            return Err(DccError::Domain(format!("threshold must be >= 0, got {theta_i}")));
        }
        if !(theta_minus_i >= 0.0 && theta_minus_i.is_finite()) {
            return Err(DccError::Domain(format!("budget of the other agents must be >= 0, got {theta_minus_i}")));
        }
        self.threshold = theta_i;
        self.others = theta_minus_i / self.theta_max();
        self.offload_penalty = congestion(1.0 + self.others, self.alpha);
        Ok(())
    }

    /// Same kernel, new threshold and coupling term.
    pub fn retarget(&self, theta_i: f64, theta_minus_i: f64) -> Result<TabularCmdp> {
        let mut out = self.clone();
        out.set_targets(theta_i, theta_minus_i)?;
        Ok(out)
    }

    /// Same kernel with the coupling given directly as an expected number
    /// of other offloaders.
    pub fn with_expected_others(&self, theta_i: f64, others: f64) -> Result<TabularCmdp> {
        self.retarget(theta_i, others * self.theta_max())
    }

    pub fn with_initial(&self, beta: Vec<f64>) -> Result<TabularCmdp> {
        if beta.len() != self.len() {
            return Err(DccError::Contract(format!("initial distribution has {} entries for {} states", beta.len(), self.len())));
        }
        let total: f64 = beta.iter().sum();
        if beta.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(DccError::Contract(format!("initial distribution sums to {total}")));
        }
        let mut out = self.clone();
        out.beta = Arc::new(beta);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[DeviceState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> DeviceState {
        self.states[i]
    }

    pub fn index_of(&self, s: &DeviceState) -> Option<usize> {
        self.index.get(s)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta_max(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// Constraint threshold in discounted units.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Expected number of other offloaders used in the reward.
    pub fn expected_others(&self) -> f64 {
        self.others
    }

    pub fn is_admissible(&self, s: usize, a: Action) -> bool {
        self.admissible[s] & (1 << a.index()) != 0
    }

    pub fn actions(&self, s: usize) -> impl Iterator<Item = Action> + '_ {
        Action::ALL.into_iter().filter(move |&a| self.is_admissible(s, a))
    }

    pub fn utility(&self, s: usize) -> f64 {
        self.utility[s]
    }

    pub fn reward(&self, s: usize, a: Action) -> f64 {
        self.utility[s] + if a.is_crowd() { self.offload_penalty } else { 0.0 }
    }

    pub fn cost(&self, _s: usize, a: Action) -> f64 {
        crowd_cost(a)
    }

    pub fn dump(&self) -> CmdpDump {
        let mut kernel = Vec::with_capacity(self.kernel.nnz());
        let mut reward = Vec::with_capacity(self.len());
        let mut cost = Vec::with_capacity(self.len());
        for s in 0..self.len() {
            let mut r = [None; 3];
            let mut c = [None; 3];
            for a in self.actions(s) {
                r[a.index()] = Some(self.reward(s, a));
                c[a.index()] = Some(self.cost(s, a));
                for (t, p) in self.kernel.row(s, a) {
                    kernel.push((s, a, t, p));
                }
            }
            reward.push(r);
            cost.push(c);
        }
        CmdpDump {
            states: self.states.to_vec(),
            kernel,
            reward,
            cost,
            beta: self.beta.to_vec(),
            discount: self.discount,
            alpha: self.alpha,
            threshold: self.threshold,
            expected_others: self.others,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.dump())?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<TabularCmdp> {
        let dump: CmdpDump = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        TabularCmdp::from_dump(&dump)
    }

    pub fn from_dump(dump: &CmdpDump) -> Result<TabularCmdp> {
        let n = dump.states.len();
        if dump.reward.len() != n || dump.cost.len() != n || dump.beta.len() != n {
            return Err(DccError::Config("dump tables do not match the state list".into()));
        }
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); 3 * n];
        for &(s, a, t, p) in &dump.kernel {
            if s >= n || t >= n {
                return Err(DccError::Config(format!("kernel triplet ({s}, {a:?}, {t}) out of range")));
            }
            rows[s * 3 + a.index()].push((t as u32, p));
        }
        let mut admissible = vec![0u8; n];
        for (s, r) in dump.reward.iter().enumerate() {
            for a in Action::ALL {
                let listed = r[a.index()].is_some();
                let has_row = !rows[s * 3 + a.index()].is_empty();
                if listed != has_row {
                    return Err(DccError::Config(format!("state {s}: reward and kernel disagree on {a:?}")));
                }
                if listed {
                    admissible[s] |= 1 << a.index();
                }
            }
            if r[Action::Wait.index()].is_none() {
                return Err(DccError::Config(format!("state {s}: Wait must be admissible")));
            }
        }
        let mut row_ptr = vec![0];
        let mut next = Vec::new();
        let mut prob = Vec::new();
        for (k, row) in rows.iter().enumerate() {
            let total: f64 = row.iter().map(|&(_, p)| p).sum();
            if !row.is_empty() && (total - 1.0).abs() > 1e-12 {
                return Err(DccError::Config(format!("kernel row {} of state {} sums to {total}", k % 3, k / 3)));
            }
            for &(t, p) in row {
                next.push(t);
                prob.push(p);
            }
            row_ptr.push(next.len());
        }
        let utility: Vec<f64> = dump.reward.iter().map(|r| r[0].expect("checked above")).collect();
        let discount = dump.discount;
        if !(discount > 0.0 && discount < 1.0) {
            return Err(DccError::Config(format!("discount must lie in (0, 1), got {discount}")));
        }
        let mut cmdp = TabularCmdp {
            index: Arc::new(StateIndex::new(&dump.states)),
            states: Arc::new(dump.states.clone()),
            admissible: Arc::new(admissible),
            kernel: Arc::new(Kernel { row_ptr, next, prob }),
            utility: Arc::new(utility),
            beta: Arc::new(dump.beta.clone()),
            discount,
            alpha: dump.alpha,
            threshold: 0.0,
            others: 0.0,
            offload_penalty: 0.0,
        };
        cmdp.set_targets(dump.threshold, dump.expected_others * cmdp.theta_max())?;
        Ok(cmdp)
    }
}

/// Serialized form of a [`TabularCmdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpDump {
    pub states: Vec<DeviceState>,
    /// `(state, action, next state, probability)`.
    pub kernel: Vec<(usize, Action, usize, f64)>,
    /// Indexed by `[state][action]`; `None` marks an inadmissible action.
    pub reward: Vec<[Option<f64>; 3]>,
    pub cost: Vec<[Option<f64>; 3]>,
    pub beta: Vec<f64>,
    pub discount: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub expected_others: f64,
}

/// Stationary randomized policy over the states of one CMDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    probs: Vec<[f64; 3]>,
}

impl AgentPolicy {
    pub fn from_probs(cmdp: &TabularCmdp, probs: Vec<[f64; 3]>) -> Result<Self> {
        if probs.len() != cmdp.len() {
            return Err(DccError::Contract(format!("policy covers {} states, CMDP has {}", probs.len(), cmdp.len())));
        }
        for (s, row) in probs.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(DccError::Contract(format!("policy row {s} is not a distribution")));
            }
            for a in Action::ALL {
                if row[a.index()] > 0.0 && !cmdp.is_admissible(s, a) {
                    return Err(DccError::Contract(format!("policy plays {a:?} where it is not allowed (state {s})")));
                }
            }
        }
        Ok(AgentPolicy { probs })
    }

    /// Plays `choose(s)` in every state, replaced by Wait where inadmissible.
    pub fn deterministic(cmdp: &TabularCmdp, mut choose: impl FnMut(usize) -> Action) -> Self {
        let probs = (0..cmdp.len())
            .map(|s| {
                let a = choose(s);
                let a = if cmdp.is_admissible(s, a) { a } else { Action::Wait };
                let mut row = [0.0; 3];
                row[a.index()] = 1.0;
                row
            })
            .collect();
        AgentPolicy { probs }
    }

    pub fn constant(cmdp: &TabularCmdp, a: Action) -> Self {
        Self::deterministic(cmdp, |_| a)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, s: usize, a: Action) -> f64 {
        self.probs[s][a.index()]
    }

    pub fn row(&self, s: usize) -> [f64; 3] {
        self.probs[s]
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|r| r.contains(&1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Action {
        let row = &self.probs[s];
        if let Some(i) = row.iter().position(|&p| p == 1.0) {
            return Action::ALL[i];
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for a in Action::ALL {
            acc += row[a.index()];
            if u < acc {
                return a;
            }
        }
        Action::ALL[row.iter().rposition(|&p| p > 0.0).unwrap_or(0)]
    }
}

/// Exact discounted reward and cost of a policy from the CMDP's `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValue {
    pub j: f64,
    pub k: f64,
    pub reward_values: Vec<f64>,
    pub cost_values: Vec<f64>,
}

/// `(J, K)` of `policy` by solving the policy-evaluation equations.
pub fn discounted_value(cmdp: &TabularCmdp, policy: &AgentPolicy) -> Result<(f64, f64)> {
    let v = evaluate_policy(cmdp, policy)?;
    Ok((v.j, v.k))
}

pub fn evaluate_policy(cmdp: &TabularCmdp, policy: &AgentPolicy) -> Result<PolicyValue> {
    if policy.len() != cmdp.len() {
        return Err(DccError::Contract(format!("policy covers {} states, CMDP has {}", policy.len(), cmdp.len())));
    }
    let n = cmdp.len();
    let mut r = vec![0.0; n];
    let mut c = vec![0.0; n];
    for s in 0..n {
        for a in cmdp.actions(s) {
            let p = policy.prob(s, a);
            r[s] += p * cmdp.reward(s, a);
            c[s] += p * cmdp.cost(s, a);
        }
    }
    let (reward_values, cost_values) = if n <= DENSE_LIMIT {
        solve_dense(cmdp, policy, &r, &c)?
    } else {
        (solve_iterative(cmdp, policy, &r), solve_iterative(cmdp, policy, &c))
    };
    let j = dot(cmdp.beta(), &reward_values);
    let k = dot(cmdp.beta(), &cost_values);
    Ok(PolicyValue {
        j,
        k,
        reward_values,
        cost_values,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn solve_dense(cmdp: &TabularCmdp, policy: &AgentPolicy, r: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cmdp.len();
    let g = cmdp.discount();
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for a in cmdp.actions(s) {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (t, q) in cmdp.kernel().row(s, a) {
                m[(s, t)] -= g * p * q;
            }
        }
    }
    let lu = m.lu();
    let solve = |rhs: &[f64]| -> Result<Vec<f64>> {
        lu.solve(&DVector::from_column_slice(rhs))
            .map(|v| v.as_slice().to_vec())
            .ok_or_else(|| DccError::Internal("singular policy-evaluation system".into()))
    };
    Ok((solve(r)?, solve(c)?))
}

/// Gauss-Seidel sweeps on `v = r + gamma P v` until the update is below 1e-12.
fn solve_iterative(cmdp: &TabularCmdp, policy: &AgentPolicy, r: &[f64]) -> Vec<f64> {
    let n = cmdp.len();
    let g = cmdp.discount();
    let mut v = r.to_vec();
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let mut acc = r[s];
            for a in cmdp.actions(s) {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let mut ev = 0.0;
                for (t, q) in cmdp.kernel().row(s, a) {
                    ev += q * v[t];
                }
                acc += g * p * ev;
            }
            delta = delta.max((acc - v[s]).abs());
            v[s] = acc;
        }
        if delta < 1e-12 {
            break;
        }
    }
    v
}

/// State distribution one step later under `policy`.
pub fn propagate(cmdp: &TabularCmdp, policy: &AgentPolicy, dist: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (s, &w) in dist.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for a in cmdp.actions(s) {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (t, q) in cmdp.kernel().row(s, a) {
                out[t] += w * p * q;
            }
        }
    }
}

/// Stationary distribution reached from `beta` under `policy`, by power
/// iteration on the lazy chain `(I + P) / 2`.
pub fn stationary_distribution(cmdp: &TabularCmdp, policy: &AgentPolicy) -> Vec<f64> {
    let n = cmdp.len();
    let mut dist = cmdp.beta().to_vec();
    let mut next = vec![0.0; n];
    for _ in 0..1_000_000 {
        propagate(cmdp, policy, &dist, &mut next);
        let mut change = 0.0;
        for s in 0..n {
            let lazy = 0.5 * (dist[s] + next[s]);
            change += (lazy - dist[s]).abs();
            dist[s] = lazy;
        }
        if change < 1e-15 {
            break;
        }
    }
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|x| *x /= total);
    dist
}

/// Per-step probability of the crowd action under `dist`.
pub fn offload_probability(policy: &AgentPolicy, dist: &[f64]) -> f64 {
    dist.iter()
        .enumerate()
        .map(|(s, &w)| w * policy.prob(s, Action::CROWD))
        .sum()
}

/// Per-agent constraint thresholds in discounted units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintVector {
    theta: Vec<f64>,
    theta_max: f64,
}

impl ConstraintVector {
    pub fn new(theta: Vec<f64>, theta_max: f64) -> Result<Self> {
        if !(theta_max > 0.0 && theta_max.is_finite()) {
            return Err(DccError::Domain(format!("theta_max must be positive, got {theta_max}")));
        }
        if let Some(t) = theta.iter().find(|&&t| !(0.0..=theta_max).contains(&t)) {
            return Err(DccError::Domain(format!("threshold {t} outside [0, {theta_max}]")));
        }
        Ok(ConstraintVector { theta, theta_max })
    }

    pub fn zeros(n: usize, theta_max: f64) -> Result<Self> {
        Self::new(vec![0.0; n], theta_max)
    }

    /// Clamps every entry into `[0, theta_max]`.
    pub fn projected(theta: Vec<f64>, theta_max: f64) -> Result<Self> {
        let theta = theta.into_iter().map(|t| t.clamp(0.0, theta_max)).collect();
        Self::new(theta, theta_max)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    pub fn values(&self) -> &[f64] {
        &self.theta
    }

    pub fn get(&self, i: usize) -> f64 {
        self.theta[i]
    }

    /// `theta_{-i}`: the sum over the other agents.
    pub fn others(&self, i: usize) -> f64 {
        self.theta.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t).sum()
    }

    /// Thresholds as offloading frequencies, `theta / theta_max`.
    pub fn frequencies(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t / self.theta_max).collect()
    }
}

/// Bound on `J - J~` for per-step offloading probabilities `freqs`:
/// `1/(1-gamma) sum_i f_i ((f_{-i}/(N-1)) d(N) - d(1 + f_{-i}))`.
///
/// Signed: nonnegative for convex `d`, nonpositive for concave `d`, zero
/// for linear `d`.
pub fn decomposition_error_bound(freqs: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    let n = freqs.len();
    if n < 2 {
        return Err(DccError::Domain(format!("the bound needs at least 2 agents, got {n}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(DccError::Domain(format!("discount must lie in (0, 1), got {gamma}")));
    }
    if freqs.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(DccError::Domain("offloading frequencies must lie in [0, 1]".into()));
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    let total: f64 = freqs.iter().sum();
    let d_n = congestion(n as f64, alpha);
    let sum: f64 = freqs
        .iter()
        .map(|&f| {
            let others = total - f;
            f * (others / (n - 1) as f64 * d_n - congestion(1.0 + others, alpha))
        })
        .sum();
    Ok(sum / (1.0 - gamma))
}

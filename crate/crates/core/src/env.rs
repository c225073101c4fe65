//! The toy edge-offloading environment.
//!
//! Each device tracks the age of information (AoI) of its last processed
//! data batch and a battery level. At every step it can wait, process a batch
//! locally (paying an energy cost drawn from a Markov chain) or offload the
//! batch to the shared edge server, which is free in energy but congestible.
//! All rewards are costs: lower is better.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DccError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Read/wait: no processing this step. Also the recharge action.
    Wait,
    LocalProcess,
    /// The crowd action.
    Offload,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Wait, Action::LocalProcess, Action::Offload];
    pub const CROWD: Action = Action::Offload;

    pub fn index(self) -> usize {
        match self {
            Action::Wait => 0,
            Action::LocalProcess => 1,
            Action::Offload => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn is_crowd(self) -> bool {
        self == Action::CROWD
    }
}

/// Cost signal of the per-agent constraint: 1 on the crowd action.
pub fn crowd_cost(a: Action) -> f64 {
    if a.is_crowd() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    /// Stay with probability 1/2, move ±1 with probability 1/4 each,
    /// reflecting at the ends of the range.
    #[default]
    BirthDeath,
    /// Every row uniform over the range (i.i.d. draws).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub min: i32,
    pub max: i32,
    #[serde(default)]
    pub kind: ChainKind,
}

impl ChainSpec {
    pub fn new(min: i32, max: i32, kind: ChainKind) -> Self {
        ChainSpec { min, max, kind }
    }

    pub fn build(&self) -> Result<MarkovChain> {
        match self.kind {
            ChainKind::BirthDeath => MarkovChain::birth_death(self.min, self.max),
            ChainKind::Uniform => MarkovChain::uniform(self.min, self.max),
        }
    }
}

/// Finite Markov chain over the integer range `min..=min + rows.len() - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    min: i32,
    rows: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn birth_death(min: i32, max: i32) -> Result<Self> {
        check_range(min, max)?;
        let n = (max - min + 1) as usize;
        let mut rows = vec![vec![0.0; n]; n];
        if n == 1 {
            rows[0][0] = 1.0;
        }
        for i in 0..n {
            if n == 1 {
                break;
            }
            rows[i][i] += 0.5;
            // reflecting: a move past either end bounces back inside
            let down = if i == 0 { i + 1 } else { i - 1 };
            let up = if i + 1 == n { i - 1 } else { i + 1 };
            rows[i][down] += 0.25;
            rows[i][up] += 0.25;
        }
        Self::from_rows(min, rows)
    }

    pub fn uniform(min: i32, max: i32) -> Result<Self> {
        check_range(min, max)?;
        let n = (max - min + 1) as usize;
        Self::from_rows(min, vec![vec![1.0 / n as f64; n]; n])
    }

    pub fn constant(value: i32) -> Self {
        MarkovChain {
            min: value,
            rows: vec![vec![1.0]],
        }
    }

    pub fn from_rows(min: i32, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(DccError::Config("empty Markov chain".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(DccError::Config(format!("chain row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(DccError::Config(format!("chain row {i} has an entry outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(DccError::Config(format!("chain row {i} sums to {total}")));
            }
        }
        Ok(MarkovChain { min, rows })
    }

    pub fn min(&self) -> i32 {
        self.min
    }

    pub fn max(&self) -> i32 {
        self.min + self.rows.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.rows.len()).map(move |i| self.min + i as i32)
    }

    pub fn contains(&self, v: i32) -> bool {
        v >= self.min && v <= self.max()
    }

    fn row(&self, current: i32) -> &[f64] {
        &self.rows[(current - self.min) as usize]
    }

    /// Successor values with positive probability.
    pub fn successors(&self, current: i32) -> impl Iterator<Item = (i32, f64)> + '_ {
        let min = self.min;
        self.row(current)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(move |(j, &p)| (min + j as i32, p))
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, current: i32, rng: &mut R) -> i32 {
        let u: f64 = rng.gen();
        let row = self.row(current);
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.min + j as i32;
            }
        }
        // rounding: fall back on the last positive entry
        let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.min + last as i32
    }
}

fn check_range(min: i32, max: i32) -> Result<()> {
    if min > max {
        return Err(DccError::Config(format!("chain range {min}..={max} is empty")));
    }
    Ok(())
}

/// One agent's MDP parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    /// AoI cap `M`.
    pub aoi_cap: u32,
    /// Battery capacity `B` in energy units.
    pub battery_cap: i32,
    pub harvest: MarkovChain,
    pub cost: MarkovChain,
    pub penalty_alpha: f64,
    pub discount: f64,
}

impl DeviceModel {
    pub fn new(
        aoi_cap: u32,
        battery_cap: i32,
        harvest: MarkovChain,
        cost: MarkovChain,
        penalty_alpha: f64,
        discount: f64,
    ) -> Result<Self> {
        let model = DeviceModel {
            aoi_cap,
            battery_cap,
            harvest,
            cost,
            penalty_alpha,
            discount,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.aoi_cap < 2 {
            return Err(DccError::Config(format!("AoI cap must be >= 2, got {}", self.aoi_cap)));
        }
        if self.battery_cap < 1 {
            return Err(DccError::Config(format!("battery cap must be >= 1, got {}", self.battery_cap)));
        }
        if self.harvest.min() < 0 {
            return Err(DccError::Config("harvest values must be nonnegative".into()));
        }
        if self.cost.min() < 1 {
            return Err(DccError::Config("processing costs must be >= 1".into()));
        }
        for (name, chain) in [("harvest", &self.harvest), ("cost", &self.cost)] {
            for row in &chain.rows {
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(DccError::Config(format!("{name} chain is not row-stochastic")));
                }
            }
        }
        if !(self.penalty_alpha > 0.0 && self.penalty_alpha.is_finite()) {
            return Err(DccError::Config(format!("penalty exponent must be positive, got {}", self.penalty_alpha)));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(DccError::Config(format!("discount must lie in (0, 1), got {}", self.discount)));
        }
        Ok(())
    }

    /// Discounted cost of offloading at every step, `1 / (1 - gamma)`.
    pub fn theta_max(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// Lowest reachable battery level: one worst-case task deficit.
    pub fn battery_floor(&self) -> i32 {
        -self.cost.max()
    }

    /// Default start: fresh data, full battery, both chains at their minimum.
    pub fn initial_state(&self) -> DeviceState {
        DeviceState {
            aoi: 1,
            battery: self.battery_cap,
            harvest: self.harvest.min(),
            cost: self.cost.min(),
        }
    }

    pub fn is_valid_state(&self, s: &DeviceState) -> bool {
        s.aoi >= 1
            && s.aoi <= self.aoi_cap
            && s.battery <= self.battery_cap
            && s.battery >= self.battery_floor()
            && self.harvest.contains(s.harvest)
            && self.cost.contains(s.cost)
    }

    /// Deterministic part of a transition: next AoI and battery given the
    /// current harvest and processing cost stored in the state.
    pub fn post_decision(&self, s: &DeviceState, a: Action) -> Result<(u32, i32)> {
        if s.pending() && a != Action::Wait {
            return Err(DccError::Contract(format!(
                "{a:?} chosen while recharging (battery {})",
                s.battery
            )));
        }
        let m = self.aoi_cap;
        let b = self.battery_cap;
        let aged = (s.aoi + 1).min(m);
        let next = match a {
            Action::Offload => (1, (s.battery + s.harvest).min(b)),
            Action::LocalProcess => {
                let rest = s.battery + s.harvest - s.cost;
                if rest >= 0 {
                    (1, rest.min(b))
                } else {
                    (aged, rest.max(self.battery_floor()))
                }
            }
            Action::Wait if s.pending() => {
                let e = (s.battery + s.harvest).min(b);
                // the pending task completes once the battery is back above zero
                if e >= 0 {
                    (1, e)
                } else {
                    (aged, e)
                }
            }
            Action::Wait => (aged, (s.battery + s.harvest).min(b)),
        };
        Ok(next)
    }

    /// Exact successor distribution of `(s, a)`.
    pub fn transitions(&self, s: &DeviceState, a: Action) -> Result<Vec<(DeviceState, f64)>> {
        let (aoi, battery) = self.post_decision(s, a)?;
        let mut out = Vec::new();
        for (h, ph) in self.harvest.successors(s.harvest) {
            for (c, pc) in self.cost.successors(s.cost) {
                out.push((
                    DeviceState {
                        aoi,
                        battery,
                        harvest: h,
                        cost: c,
                    },
                    ph * pc,
                ));
            }
        }
        Ok(out)
    }

    pub fn admissible_actions(&self, s: &DeviceState) -> &'static [Action] {
        if s.pending() {
            &[Action::Wait]
        } else {
            &Action::ALL
        }
    }

    /// All states in `{1..M} x {0..B} x H x C` plus every negative-battery
    /// state reachable from them, in lexicographic order.
    pub fn state_space(&self) -> Vec<DeviceState> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        for aoi in 1..=self.aoi_cap {
            for battery in 0..=self.battery_cap {
                for harvest in self.harvest.values() {
                    for cost in self.cost.values() {
                        let s = DeviceState {
                            aoi,
                            battery,
                            harvest,
                            cost,
                        };
                        seen.insert(s);
                        queue.push_back(s);
                    }
                }
            }
        }
        while let Some(s) = queue.pop_front() {
            for &a in self.admissible_actions(&s) {
                let succ = self.transitions(&s, a).expect("admissible action");
                for (t, _) in succ {
                    if seen.insert(t) {
                        queue.push_back(t);
                    }
                }
            }
        }
        seen.into_iter().collect()
    }
}

/// Local state of one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceState {
    pub aoi: u32,
    pub battery: i32,
    /// Energy harvested during the current step.
    pub harvest: i32,
    /// Energy a local processing would cost in the current step.
    pub cost: i32,
}

impl DeviceState {
    /// A task is pending while the battery is negative (recharge vacation).
    pub fn pending(&self) -> bool {
        self.battery < 0
    }
}

/// Advances one device by one step.
pub fn step_device<R: Rng + ?Sized>(s: &DeviceState, a: Action, model: &DeviceModel, rng: &mut R) -> Result<DeviceState> {
    let (aoi, battery) = model.post_decision(s, a)?;
    let harvest = model.harvest.sample_next(s.harvest, rng);
    let cost = model.cost.sample_next(s.cost, rng);
    Ok(DeviceState {
        aoi,
        battery,
        harvest,
        cost,
    })
}

/// Congestion penalty `d(n) = (n - 1)^alpha`.
pub fn penalty(n: f64, alpha: f64) -> Result<f64> {
    if !(n >= 1.0) {
        return Err(DccError::Domain(format!("penalty needs n >= 1, got {n}")));
    }
    if !(alpha > 0.0) {
        return Err(DccError::Domain(format!("penalty exponent must be positive, got {alpha}")));
    }
    Ok(congestion(n, alpha))
}

/// `d(n)` without argument checks; `n` is clamped to 1 from below.
#[inline]
pub(crate) fn congestion(n: f64, alpha: f64) -> f64 {
    let excess = (n - 1.0).max(0.0);
    if alpha == 1.0 {
        excess
    } else {
        excess.powf(alpha)
    }
}

/// `d'(n) = alpha (n - 1)^(alpha - 1)`.
pub fn penalty_derivative(n: f64, alpha: f64) -> Result<f64> {
    if !(n >= 1.0) {
        return Err(DccError::Domain(format!("penalty needs n >= 1, got {n}")));
    }
    if alpha == 1.0 {
        return Ok(1.0);
    }
    Ok(alpha * (n - 1.0).powf(alpha - 1.0))
}

/// Local utility: the AoI, plus the deficit when the battery is negative.
pub fn local_utility(s: &DeviceState) -> f64 {
    if s.battery >= 0 {
        s.aoi as f64
    } else {
        (s.aoi as i64 - s.battery as i64) as f64
    }
}

/// Joint cost of the true coupled system:
/// `sum_i u_i(s_i) + 1[a_i = offload] d(N(a))`.
pub fn joint_reward(states: &[DeviceState], actions: &[Action], alpha: f64) -> Result<f64> {
    if states.len() != actions.len() {
        return Err(DccError::Contract(format!(
            "{} states but {} actions",
            states.len(),
            actions.len()
        )));
    }
    let crowd = actions.iter().filter(|a| a.is_crowd()).count();
    let shared = if crowd > 0 { penalty(crowd as f64, alpha)? } else { 0.0 };
    Ok(states
        .iter()
        .zip(actions)
        .map(|(s, a)| local_utility(s) + if a.is_crowd() { shared } else { 0.0 })
        .sum())
}

/// Decomposed cost of one agent, with the number of other offloaders
/// replaced by their expected count `others`.
pub fn approx_reward(s: &DeviceState, a: Action, others: f64, alpha: f64) -> Result<f64> {
    if !(others >= 0.0) {
        return Err(DccError::Domain(format!("expected number of other offloaders must be >= 0, got {others}")));
    }
    let extra = if a.is_crowd() { penalty(1.0 + others, alpha)? } else { 0.0 };
    Ok(local_utility(s) + extra)
}

/// Checks that offloading alone is individually attractive.
///
/// For every state with a nonnegative battery the one-step lookahead cost
/// `u(s) + 1[offload] d(1) + gamma u(s')` of a solitary offload is compared to
/// the alternatives. Waiting must be strictly worse everywhere, local
/// processing must never be better and must be strictly worse somewhere.
pub fn check_crowd_incentive(model: &DeviceModel) -> bool {
    let solo = congestion(1.0, model.penalty_alpha);
    let lookahead = |s: &DeviceState, a: Action| -> f64 {
        let (aoi, battery) = model.post_decision(s, a).expect("battery is nonnegative");
        let next = DeviceState {
            aoi,
            battery,
            harvest: s.harvest,
            cost: s.cost,
        };
        let immediate = local_utility(s) + if a.is_crowd() { solo } else { 0.0 };
        immediate + model.discount * local_utility(&next)
    };
    let mut strict_somewhere = false;
    for s in model.state_space().iter().filter(|s| !s.pending()) {
        let offload = lookahead(s, Action::Offload);
        let wait = lookahead(s, Action::Wait);
        let local = lookahead(s, Action::LocalProcess);
        if !(offload < wait) || offload > local {
            return false;
        }
        strict_somewhere |= offload < local;
    }
    strict_somewhere
}

/// Environment configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    #[serde(rename = "M")]
    pub aoi_cap: u32,
    #[serde(rename = "B")]
    pub battery_cap: i32,
    pub alpha: f64,
    pub gamma: f64,
    pub harvest: ChainSpec,
    pub cost: ChainSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_agents: 10,
            aoi_cap: 15,
            battery_cap: 15,
            alpha: 1.0,
            gamma: 0.95,
            harvest: ChainSpec::new(0, 2, ChainKind::BirthDeath),
            cost: ChainSpec::new(1, 5, ChainKind::BirthDeath),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EnvConfig = serde_json::from_str(text)?;
        cfg.device_model()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn device_model(&self) -> Result<DeviceModel> {
        DeviceModel::new(
            self.aoi_cap,
            self.battery_cap,
            self.harvest.build()?,
            self.cost.build()?,
            self.alpha,
            self.gamma,
        )
    }
}

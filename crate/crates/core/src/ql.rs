//! Fast and intermediate timescales: tabular Q-learning on the shaped
//! reward `r + lambda c` and projected ascent on the multiplier `lambda`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{evaluate_policy, AgentPolicy, TabularCmdp};
use crate::env::Action;
use crate::error::{DccError, Result};
use crate::rng::{stream_with, Stream, StreamRng};

/// Lagrangian reward seen by the learner (a cost).
pub fn shaped_reward(r_hat: f64, c: f64, lambda: f64) -> f64 {
    r_hat + lambda * c
}

/// Tabular action values; lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    q: Vec<[f64; 3]>,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    /// Whether the crowd action has ever been updated.
    crowd_trained: bool,
}

impl QTable {
    pub fn new(states: usize, learning_rate: f64, epsilon: f64, epsilon_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate <= 1.0) {
            return Err(DccError::Config(format!("learning rate must lie in (0, 1], got {learning_rate}")));
        }
        if !(0.0..=1.0).contains(&epsilon) || !(0.0..=1.0).contains(&epsilon_decay) {
            return Err(DccError::Config("exploration rate and decay must lie in [0, 1]".into()));
        }
        Ok(QTable {
            q: vec![[0.0; 3]; states],
            learning_rate,
            epsilon,
            epsilon_decay,
            crowd_trained: false,
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn get(&self, s: usize, a: Action) -> f64 {
        self.q[s][a.index()]
    }

    pub fn set(&mut self, s: usize, a: Action, v: f64) {
        self.q[s][a.index()] = v;
    }

    /// Greedy action among the admissible ones; ties go to the first in
    /// `Action::ALL` order. `allow_crowd = false` masks the crowd action.
    pub fn greedy(&self, cmdp: &TabularCmdp, s: usize, allow_crowd: bool) -> Action {
        let mut best = Action::Wait;
        let mut best_q = f64::INFINITY;
        for a in cmdp.actions(s) {
            if a.is_crowd() && !allow_crowd {
                continue;
            }
            let v = self.q[s][a.index()];
            if v < best_q {
                best_q = v;
                best = a;
            }
        }
        best
    }

    pub fn min_value(&self, cmdp: &TabularCmdp, s: usize, allow_crowd: bool) -> f64 {
        self.get(s, self.greedy(cmdp, s, allow_crowd))
    }

    pub fn epsilon_greedy<R: Rng + ?Sized>(&self, cmdp: &TabularCmdp, s: usize, allow_crowd: bool, rng: &mut R) -> Action {
        if self.epsilon > 0.0 && rng.gen::<f64>() < self.epsilon {
            let choices: Vec<Action> = cmdp.actions(s).filter(|a| allow_crowd || !a.is_crowd()).collect();
            return choices[rng.gen_range(0..choices.len())];
        }
        self.greedy(cmdp, s, allow_crowd)
    }

    pub fn greedy_policy(&self, cmdp: &TabularCmdp, allow_crowd: bool) -> AgentPolicy {
        AgentPolicy::deterministic(cmdp, |s| self.greedy(cmdp, s, allow_crowd))
    }

    pub fn decay_exploration(&mut self) {
        self.epsilon *= self.epsilon_decay;
    }

    /// Copies the best non-crowd value into the crowd entries of a table
    /// trained with the crowd action masked, so that unmasking does not make
    /// the never-updated (optimistic) crowd values look best everywhere.
    pub fn neutralize_crowd(&mut self, cmdp: &TabularCmdp) {
        if self.crowd_trained {
            return;
        }
        for s in 0..self.q.len() {
            if cmdp.is_admissible(s, Action::CROWD) {
                let v = self.min_value(cmdp, s, false);
                self.q[s][Action::CROWD.index()] = v;
            }
        }
        self.crowd_trained = true;
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().flatten().all(|v| v.is_finite())
    }
}

/// `q(s,a) <- (1 - lr) q(s,a) + lr (r + gamma min_a' q(s',a'))`.
#[allow(clippy::too_many_arguments)]
pub fn q_update(qt: &mut QTable, cmdp: &TabularCmdp, s: usize, a: Action, r_total: f64, s_next: usize, allow_crowd: bool) {
    let target = r_total + cmdp.discount() * qt.min_value(cmdp, s_next, allow_crowd);
    let lr = qt.learning_rate;
    qt.crowd_trained |= allow_crowd;
    let old = qt.q[s][a.index()];
    qt.q[s][a.index()] = (1.0 - lr) * old + lr * target;
}

/// Projected multiplier with its step counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub eta0: f64,
    pub k: usize,
}

impl LagrangeState {
    pub fn new(eta0: f64) -> Self {
        LagrangeState { lambda: 0.0, eta0, k: 0 }
    }

    /// `eta_k = eta0 / (1 + k)`.
    pub fn eta(&self) -> f64 {
        self.eta0 / (1.0 + self.k as f64)
    }

    pub fn step(&mut self, k_hat: f64, theta_i: f64) -> Result<()> {
        self.lambda = lambda_update(self.lambda, self.eta(), k_hat, theta_i)?;
        self.k += 1;
        Ok(())
    }
}

/// `max(0, lambda + eta (k_hat - theta_i))`.
pub fn lambda_update(lambda: f64, eta: f64, k_hat: f64, theta_i: f64) -> Result<f64> {
    if !(k_hat >= 0.0) {
        return Err(DccError::Domain(format!("estimated cost must be >= 0, got {k_hat}")));
    }
    Ok((lambda + eta * (k_hat - theta_i)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Q-learning steps per call, split evenly over the outer iterations.
    pub budget: usize,
    pub outer_iters: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub eta0: f64,
    /// Monte Carlo rollouts per cost estimate.
    pub rollouts: usize,
    /// Rollout horizon; `None` picks `ceil(ln 1e-3 / ln gamma)`.
    pub horizon: Option<usize>,
    /// Largest CMDP evaluated exactly at the end of training.
    pub exact_cap: usize,
    /// Trailing fraction of outer iterations whose greedy policies are
    /// candidates for the returned policy.
    pub candidate_fraction: f64,
    /// Rollouts per estimate when calibrating the returned policy.
    pub calibration_rollouts: usize,
    /// Bisection steps on the mixing weight.
    pub calibration_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            budget: 100_000,
            outer_iters: 25,
            learning_rate: 0.5,
            epsilon: 0.05,
            epsilon_decay: 0.95,
            eta0: 0.2,
            rollouts: 32,
            horizon: None,
            exact_cap: 20_000,
            candidate_fraction: 0.5,
            calibration_rollouts: 256,
            calibration_steps: 12,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_outer(&self) -> usize {
        self.budget / self.outer_iters.max(1)
    }

    /// First outer iteration whose greedy policy is a candidate.
    pub fn candidate_start(&self) -> usize {
        let tail = ((self.outer_iters as f64) * self.candidate_fraction).ceil() as usize;
        self.outer_iters - tail.clamp(1, self.outer_iters)
    }

    pub fn rollout_horizon(&self, gamma: f64) -> usize {
        self.horizon.unwrap_or_else(|| (1e-3f64.ln() / gamma.ln()).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(DccError::Config("at least one outer iteration is needed".into()));
        }
        if self.steps_per_outer() == 0 {
            return Err(DccError::Config(format!(
                "budget of {} steps cannot fill {} outer iterations",
                self.budget, self.outer_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.candidate_fraction) {
            return Err(DccError::Config("candidate_fraction must lie in [0, 1]".into()));
        }
        if self.rollouts == 0 || self.calibration_rollouts == 0 {
            return Err(DccError::Config("at least one rollout is needed".into()));
        }
        Ok(())
    }
}

/// Telemetry of one outer (multiplier) iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer_iter: usize,
    pub lambda: f64,
    pub j_hat: f64,
    pub k_hat: f64,
    pub epsilon: f64,
}

/// Learner state carried from one evaluation to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub q: QTable,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Returned policy: a trailing greedy policy, or a state-wise mixture of
    /// two of them calibrated to meet the constraint.
    pub policy: AgentPolicy,
    pub lambda: f64,
    /// Discounted approximated reward of `policy`.
    pub j: f64,
    /// Discounted offload cost of `policy`.
    pub k: f64,
    /// Lagrangian value `j + lambda (k - theta_i)`.
    pub j_lagrangian: f64,
    /// Whether `j` and `k` are exact or Monte Carlo estimates.
    pub exact: bool,
    pub q: QTable,
    pub history: Vec<OuterRecord>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            q: self.q.clone(),
            lambda: self.lambda,
        }
    }
}

pub(crate) fn sample_initial<R: Rng + ?Sized>(cmdp: &TabularCmdp, rng: &mut R) -> usize {
    let beta = cmdp.beta();
    if let Some(s) = beta.iter().position(|&p| p == 1.0) {
        return s;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (s, &p) in beta.iter().enumerate() {
        acc += p;
        if u < acc {
            return s;
        }
    }
    beta.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Monte Carlo estimate of `(J, K)` for `policy`: mean discounted reward
/// and cost over `rollouts` truncated episodes.
pub fn rollout_estimate(cmdp: &TabularCmdp, policy: &AgentPolicy, rollouts: usize, horizon: usize, rng: &mut StreamRng) -> (f64, f64) {
    let g = cmdp.discount();
    let mut j = 0.0;
    let mut k = 0.0;
    for _ in 0..rollouts {
        let mut s = sample_initial(cmdp, rng);
        let mut disc = 1.0;
        for _ in 0..horizon {
            let a = policy.sample(s, rng);
            j += disc * cmdp.reward(s, a);
            k += disc * cmdp.cost(s, a);
            disc *= g;
            s = cmdp.kernel().sample(s, a, rng);
        }
    }
    (j / rollouts as f64, k / rollouts as f64)
}

/// Turns the trailing greedy policies into the returned policy.
///
/// A deterministic policy generally cannot meet a binding constraint with
/// equality, while the constrained optimum mixes two deterministic policies.
/// The best feasible and the best infeasible candidate are mixed state-wise,
/// with the weight found by bisection on Monte Carlo cost estimates.
struct Recovery<'a> {
    cmdp: &'a TabularCmdp,
    theta_i: f64,
    rollouts: usize,
    horizon: usize,
    seed: u64,
}

impl Recovery<'_> {
    fn estimate(&self, policy: &AgentPolicy) -> (f64, f64) {
        // common random numbers across all calibration estimates
        let mut rng = stream_with(self.seed, 0, Stream::Evaluation, 1);
        rollout_estimate(self.cmdp, policy, self.rollouts, self.horizon, &mut rng)
    }

    fn mix(&self, lo: &[Action], hi: &[Action], w: f64) -> Result<AgentPolicy> {
        let probs = lo
            .iter()
            .zip(hi)
            .map(|(a, b)| {
                let mut row = [0.0; 3];
                row[a.index()] += 1.0 - w;
                row[b.index()] += w;
                row
            })
            .collect();
        AgentPolicy::from_probs(self.cmdp, probs)
    }

    fn recover(
        &self,
        candidates: Vec<Vec<Action>>,
        masked: Vec<Action>,
        lambda: f64,
        steps: usize,
    ) -> Result<(AgentPolicy, (f64, f64))> {
        let mut unique: Vec<Vec<Action>> = vec![masked];
        for c in candidates {
            if !unique.contains(&c) {
                unique.push(c);
            }
        }
        let mut scored = Vec::with_capacity(unique.len());
        for actions in unique {
            let est = self.estimate(&self.mix(&actions, &actions, 0.0)?);
            scored.push((actions, est));
        }
        let score = |e: &(f64, f64)| e.0 + lambda * (e.1 - self.theta_i);
        let best = |feasible: bool| {
            scored
                .iter()
                .filter(|(_, e)| (e.1 <= self.theta_i) == feasible)
                .min_by(|a, b| score(&a.1).total_cmp(&score(&b.1)))
                .cloned()
        };
        // the masked policy never offloads, so a feasible candidate exists
        let (lo, lo_est) = best(true).ok_or_else(|| DccError::Internal("no feasible candidate".into()))?;
        let Some((hi, hi_est)) = best(false) else {
            return Ok((self.mix(&lo, &lo, 0.0)?, lo_est));
        };
        if hi_est.0 >= lo_est.0 {
            return Ok((self.mix(&lo, &lo, 0.0)?, lo_est));
        }
        let (mut a, mut b) = (0.0, 1.0);
        let mut est = lo_est;
        for _ in 0..steps {
            let m = 0.5 * (a + b);
            let e = self.estimate(&self.mix(&lo, &hi, m)?);
            if e.1 <= self.theta_i {
                a = m;
                est = e;
            } else {
                b = m;
            }
        }
        Ok((self.mix(&lo, &hi, a)?, est))
    }
}

/// Learns a policy for `cmdp` under the threshold `theta_i` (discounted
/// units). All randomness derives from `seed`.
pub fn train_constrained(cmdp: &TabularCmdp, theta_i: f64, config: &TrainConfig, warm: Option<&WarmStart>, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if !(0.0..=cmdp.theta_max() + 1e-12).contains(&theta_i) {
        return Err(DccError::Domain(format!("threshold {theta_i} outside [0, {}]", cmdp.theta_max())));
    }
    let allow_crowd = theta_i > 0.0;
    let mut q = match warm {
        Some(w) if w.q.len() == cmdp.len() => {
            let mut q = w.q.clone();
            q.learning_rate = config.learning_rate;
            q.epsilon = config.epsilon;
            q.epsilon_decay = config.epsilon_decay;
            q
        }
        Some(_) => return Err(DccError::Contract("warm-start table does not match the CMDP".into())),
        None => QTable::new(cmdp.len(), config.learning_rate, config.epsilon, config.epsilon_decay)?,
    };
    if allow_crowd {
        q.neutralize_crowd(cmdp);
    }
    let mut lagrange = LagrangeState::new(config.eta0);
    if allow_crowd {
        lagrange.lambda = warm.map_or(0.0, |w| w.lambda);
    }
    let mut explore = stream_with(seed, 0, Stream::Exploration, 0);
    let mut dynamics = stream_with(seed, 0, Stream::Dynamics, 0);
    let mut evaluation = stream_with(seed, 0, Stream::Evaluation, 0);
    let steps = config.steps_per_outer();
    let horizon = config.rollout_horizon(cmdp.discount());
    let mut history = Vec::with_capacity(config.outer_iters);
    let candidate_start = config.candidate_start();
    let mut candidates = Vec::new();
    let mut trailing_lambda = Vec::new();
    for outer in 0..config.outer_iters {
        let mut s = sample_initial(cmdp, &mut dynamics);
        for _ in 0..steps {
            let a = q.epsilon_greedy(cmdp, s, allow_crowd, &mut explore);
            let r = shaped_reward(cmdp.reward(s, a), cmdp.cost(s, a), lagrange.lambda);
            let next = cmdp.kernel().sample(s, a, &mut dynamics);
            q_update(&mut q, cmdp, s, a, r, next, allow_crowd);
            s = next;
        }
        let policy = q.greedy_policy(cmdp, allow_crowd);
        let (j_hat, k_hat) = rollout_estimate(cmdp, &policy, config.rollouts, horizon, &mut evaluation);
        if outer >= candidate_start {
            candidates.push((0..cmdp.len()).map(|s| q.greedy(cmdp, s, allow_crowd)).collect());
            trailing_lambda.push(lagrange.lambda);
        }
        if allow_crowd {
            lagrange.step(k_hat, theta_i)?;
        }
        history.push(OuterRecord {
            outer_iter: outer,
            lambda: lagrange.lambda,
            j_hat,
            k_hat,
            epsilon: q.epsilon,
        });
        q.decay_exploration();
    }
    if !q.is_finite() {
        return Err(DccError::Internal("Q-table diverged".into()));
    }
    let recovery = Recovery {
        cmdp,
        theta_i,
        rollouts: config.calibration_rollouts,
        horizon,
        seed,
    };
    let (policy, estimate) = if allow_crowd {
        let masked: Vec<Action> = (0..cmdp.len()).map(|s| q.greedy(cmdp, s, false)).collect();
        let lambda_bar = trailing_lambda.iter().sum::<f64>() / trailing_lambda.len().max(1) as f64;
        recovery.recover(candidates, masked, lambda_bar, config.calibration_steps)?
    } else {
        let p = q.greedy_policy(cmdp, false);
        let e = recovery.estimate(&p);
        (p, e)
    };
    let exact = cmdp.len() <= config.exact_cap;
    let (j, k) = if exact {
        let v = evaluate_policy(cmdp, &policy)?;
        (v.j, v.k)
    } else {
        estimate
    };
    let lambda = lagrange.lambda;
    Ok(TrainOutcome {
        j_lagrangian: j + lambda * (k - theta_i),
        policy,
        lambda,
        j,
        k,
        exact,
        q,
        history,
        steps: steps * config.outer_iters,
    })
}

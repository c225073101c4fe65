//! Evaluation of composed local policies under the true coupled reward.
//!
//! Agents never interact through the dynamics, only through the congestion
//! term. Marginal state distributions therefore evolve independently and the
//! number of offloaders at a given step is Poisson-binomial in the per-agent
//! offload probabilities, which gives an exact evaluation without touching
//! the product state space.

use rand::Rng;
use serde::Serialize;

use crate::cmdp::{propagate, AgentPolicy, TabularCmdp};
use crate::env::{congestion, joint_reward, step_device, Action, DeviceModel, DeviceState};
use crate::error::{DccError, Result};
use crate::rng::StreamRng;

/// One agent of a composed system.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub cmdp: &'a TabularCmdp,
    pub policy: &'a AgentPolicy,
    /// Initial state distribution; `None` uses the CMDP's `beta`.
    pub initial: Option<&'a [f64]>,
}

impl<'a> Member<'a> {
    pub fn new(cmdp: &'a TabularCmdp, policy: &'a AgentPolicy) -> Self {
        Member { cmdp, policy, initial: None }
    }

    pub fn starting_from(mut self, dist: &'a [f64]) -> Self {
        self.initial = Some(dist);
        self
    }

    fn initial(&self) -> &[f64] {
        self.initial.unwrap_or_else(|| self.cmdp.beta())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointValue {
    /// Expected discounted true joint cost.
    pub reward: f64,
    /// Discounted offload count of each agent.
    pub costs: Vec<f64>,
    /// `(1 - gamma) mean_i K_i`: per-step offload probability averaged over
    /// agents and discounted time.
    pub offload_frequency: f64,
}

fn check_members(members: &[Member<'_>]) -> Result<(f64, f64)> {
    let first = members
        .first()
        .ok_or_else(|| DccError::Contract("a joint system needs at least one agent".into()))?;
    let (gamma, alpha) = (first.cmdp.discount(), first.cmdp.alpha());
    for (i, m) in members.iter().enumerate() {
        if m.cmdp.discount() != gamma || m.cmdp.alpha() != alpha {
            return Err(DccError::Contract(format!("agent {i} disagrees on the discount or the penalty exponent")));
        }
        if m.policy.len() != m.cmdp.len() || m.initial().len() != m.cmdp.len() {
            return Err(DccError::Contract(format!("agent {i}: policy or initial distribution does not match its CMDP")));
        }
    }
    Ok((gamma, alpha))
}

/// Distribution of the number of successes among independent Bernoulli
/// trials with the given probabilities.
pub fn poisson_binomial(probs: &[f64]) -> Vec<f64> {
    let mut dist = vec![0.0; probs.len() + 1];
    dist[0] = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        for n in (0..=k + 1).rev() {
            let stay = dist[n] * (1.0 - p);
            let up = if n > 0 { dist[n - 1] * p } else { 0.0 };
            dist[n] = stay + up;
        }
    }
    dist
}

/// `E[d(1 + N_{-i})]` for every agent `i`, where `N_{-i}` counts the other
/// offloaders.
fn expected_penalties(probs: &[f64], table: &[f64]) -> Vec<f64> {
    let n = probs.len();
    let mut out = Vec::with_capacity(n);
    let mut others = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        others.clear();
        others.extend(probs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &p)| p));
        let dist = poisson_binomial(&others);
        let e: f64 = dist.iter().enumerate().map(|(k, &w)| w * table[k]).sum();
        out.push(e);
    }
    out
}

/// Exact expected discounted joint cost of independent local policies.
///
/// The series is truncated once `gamma^t` falls below `tol`; the neglected
/// tail is at most `tol / (1 - gamma)` times the largest per-step cost.
pub fn joint_value(members: &[Member<'_>], tol: f64) -> Result<JointValue> {
    let (gamma, alpha) = check_members(members)?;
    let n = members.len();
    // d(1 + k) for k other offloaders
    let table: Vec<f64> = (0..=n).map(|k| congestion(1.0 + k as f64, alpha)).collect();
    let mut dists: Vec<Vec<f64>> = members.iter().map(|m| m.initial().to_vec()).collect();
    let mut scratch: Vec<Vec<f64>> = members.iter().map(|m| vec![0.0; m.cmdp.len()]).collect();
    let mut reward = 0.0;
    let mut costs = vec![0.0; n];
    let mut disc = 1.0;
    let mut probs = vec![0.0; n];
    while disc >= tol {
        let mut step = 0.0;
        for (i, m) in members.iter().enumerate() {
            let mut p = 0.0;
            for (s, &w) in dists[i].iter().enumerate() {
                if w != 0.0 {
                    step += w * m.cmdp.utility(s);
                    p += w * m.policy.prob(s, Action::CROWD);
                }
            }
            probs[i] = p;
            costs[i] += disc * p;
        }
        if n > 1 {
            for (p, e) in probs.iter().zip(expected_penalties(&probs, &table)) {
                step += p * e;
            }
        }
        reward += disc * step;
        for (i, m) in members.iter().enumerate() {
            propagate(m.cmdp, m.policy, &dists[i], &mut scratch[i]);
            std::mem::swap(&mut dists[i], &mut scratch[i]);
        }
        disc *= gamma;
    }
    let offload_frequency = (1.0 - gamma) * costs.iter().sum::<f64>() / n as f64;
    Ok(JointValue {
        reward,
        costs,
        offload_frequency,
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

fn sample_from<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (s, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return s;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Simulates the coupled system with [`step_device`] and the true joint
/// reward, returning the mean discounted cost over `episodes` truncated
/// episodes.
pub fn simulate_joint(
    models: &[DeviceModel],
    members: &[Member<'_>],
    episodes: usize,
    horizon: usize,
    rng: &mut StreamRng,
) -> Result<Estimate> {
    let (gamma, alpha) = check_members(members)?;
    if models.len() != members.len() {
        return Err(DccError::Contract(format!("{} models for {} agents", models.len(), members.len())));
    }
    if episodes < 2 {
        return Err(DccError::Config("at least two episodes are needed for a standard error".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut states: Vec<DeviceState> = Vec::with_capacity(members.len());
    let mut actions: Vec<Action> = Vec::with_capacity(members.len());
    for _ in 0..episodes {
        states.clear();
        for m in members {
            states.push(m.cmdp.state(sample_from(m.initial(), rng)));
        }
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            actions.clear();
            for (m, s) in members.iter().zip(&states) {
                let idx = m
                    .cmdp
                    .index_of(s)
                    .ok_or_else(|| DccError::Internal(format!("simulated state {s:?} is not enumerated")))?;
                actions.push(m.policy.sample(idx, rng));
            }
            total += disc * joint_reward(&states, &actions, alpha)?;
            for ((s, a), model) in states.iter_mut().zip(&actions).zip(models) {
                *s = step_device(s, *a, model, rng)?;
            }
            disc *= gamma;
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

//! Independent Q-learning baselines on the true coupled system.
//!
//! Agents step in lockstep. Each agent only sees its own state and the
//! scalar reward handed to it by the environment; the congestion count enters
//! through that reward alone.

use serde::{Deserialize, Serialize};

use crate::cmdp::{AgentPolicy, TabularCmdp};
use crate::coordinator::{agent_cmdps, IterationRecord, RunReport, TelemetryRow};
use crate::env::{congestion, Action, DeviceModel};
use crate::error::{DccError, Result};
use crate::joint::{joint_value, Member};
use crate::ql::{q_update, sample_initial, QTable};
use crate::rng::{stream, Stream, StreamRng};

/// What each agent learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// `u_i(s_i) + 1[a_i = offload] d(N(a))`.
    Selfish,
    /// The full joint reward.
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IqlConfig {
    /// Lockstep joint steps.
    pub joint_steps: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    /// Joint steps per episode; states restart from `beta` and exploration
    /// decays once per episode.
    pub episode_len: usize,
    /// Number of evenly spaced evaluations of the greedy policies, in
    /// addition to the one before training.
    pub checkpoints: usize,
    pub joint_tol: f64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            joint_steps: 160_000,
            learning_rate: 0.05,
            epsilon: 0.05,
            epsilon_decay: 0.95,
            episode_len: 2000,
            checkpoints: 5,
            joint_tol: 1e-6,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joint_steps == 0 || self.episode_len == 0 || self.checkpoints == 0 {
            return Err(DccError::Config("IQL needs positive steps, episode length and checkpoints".into()));
        }
        Ok(())
    }
}

/// One learner. It owns its state and its random streams and never sees
/// anything about the other agents.
#[derive(Debug, Clone)]
pub struct IqlAgent<'a> {
    cmdp: &'a TabularCmdp,
    q: QTable,
    state: usize,
    last: Action,
    explore: StreamRng,
    dynamics: StreamRng,
}

impl<'a> IqlAgent<'a> {
    pub fn new(cmdp: &'a TabularCmdp, config: &IqlConfig, seed: u64, id: usize) -> Result<Self> {
        let mut dynamics = stream(seed, id, Stream::Dynamics);
        let state = sample_initial(cmdp, &mut dynamics);
        Ok(IqlAgent {
            cmdp,
            q: QTable::new(cmdp.len(), config.learning_rate, config.epsilon, config.epsilon_decay)?,
            state,
            last: Action::Wait,
            explore: stream(seed, id, Stream::Exploration),
            dynamics,
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn q(&self) -> &QTable {
        &self.q
    }

    /// Epsilon-greedy action in the current state.
    pub fn act(&mut self) -> Action {
        self.last = self.q.epsilon_greedy(self.cmdp, self.state, true, &mut self.explore);
        self.last
    }

    /// Moves to the next state and updates on the reward of the last action.
    pub fn learn(&mut self, reward: f64) {
        let next = self.cmdp.kernel().sample(self.state, self.last, &mut self.dynamics);
        q_update(&mut self.q, self.cmdp, self.state, self.last, reward, next, true);
        self.state = next;
    }

    pub fn restart(&mut self) {
        self.state = sample_initial(self.cmdp, &mut self.dynamics);
        self.q.decay_exploration();
    }

    pub fn greedy_policy(&self) -> AgentPolicy {
        self.q.greedy_policy(self.cmdp, true)
    }
}

/// Running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

pub fn train_iql(models: &[DeviceModel], config: &IqlConfig, seed: u64) -> Result<RunReport> {
    run(models, config, seed, Signal::Selfish)
}

pub fn train_iql_common(models: &[DeviceModel], config: &IqlConfig, seed: u64) -> Result<RunReport> {
    run(models, config, seed, Signal::Common)
}

pub fn run(models: &[DeviceModel], config: &IqlConfig, seed: u64, signal: Signal) -> Result<RunReport> {
    config.validate()?;
    let cmdps = agent_cmdps(models)?;
    run_on(&cmdps, config, seed, signal)
}

/// [`run`] on prebuilt agent CMDPs.
pub fn run_on(cmdps: &[TabularCmdp], config: &IqlConfig, seed: u64, signal: Signal) -> Result<RunReport> {
    config.validate()?;
    let n = cmdps.len();
    let first = cmdps.first().ok_or_else(|| DccError::Config("no agents".into()))?;
    let alpha = first.alpha();
    let mut agents = cmdps
        .iter()
        .enumerate()
        .map(|(i, c)| IqlAgent::new(c, config, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(config.checkpoints + 1);
    let mut telemetry = Vec::new();
    let mut spread = Welford::default();
    let evaluate = |agents: &[IqlAgent], iteration: usize, steps: usize| -> Result<IterationRecord> {
        let policies: Vec<AgentPolicy> = agents.iter().map(|a| a.greedy_policy()).collect();
        let members: Vec<Member> = cmdps.iter().zip(&policies).map(|(c, p)| Member::new(c, p)).collect();
        let joint = joint_value(&members, config.joint_tol)?;
        Ok(IterationRecord {
            iteration,
            theta: Vec::new(),
            eps: 0.0,
            j: Vec::new(),
            k: joint.costs.clone(),
            lambda: Vec::new(),
            j_lagrangian: Vec::new(),
            gradient: Vec::new(),
            joint_reward: joint.reward,
            offload_frequency: joint.offload_frequency,
            steps: steps * n,
        })
    };
    records.push(evaluate(&agents, 0, 0)?);
    let mut actions = vec![Action::Wait; n];
    let mut rewards = vec![0.0; n];
    let mut episode_return = vec![0.0; n];
    let mut episode = 0;
    let mut next_checkpoint = 1;
    for t in 1..=config.joint_steps {
        for (a, agent) in actions.iter_mut().zip(agents.iter_mut()) {
            *a = agent.act();
        }
        let crowd = actions.iter().filter(|a| a.is_crowd()).count();
        let d = congestion(crowd.max(1) as f64, alpha);
        for ((r, agent), a) in rewards.iter_mut().zip(&agents).zip(&actions) {
            *r = agent.cmdp.utility(agent.state()) + if a.is_crowd() { d } else { 0.0 };
        }
        let total: f64 = rewards.iter().sum();
        for (i, agent) in agents.iter_mut().enumerate() {
            let r = match signal {
                Signal::Selfish => rewards[i],
                Signal::Common => total,
            };
            spread.push(r);
            episode_return[i] += r;
            agent.learn(r);
        }
        if t % config.episode_len == 0 {
            for (i, agent) in agents.iter_mut().enumerate() {
                telemetry.push(TelemetryRow {
                    iteration: next_checkpoint - 1,
                    agent_id: i,
                    outer_iter: episode,
                    lambda: 0.0,
                    j_hat: episode_return[i] / config.episode_len as f64,
                    k_hat: 0.0,
                    epsilon: agent.q().epsilon,
                });
                episode_return[i] = 0.0;
                agent.restart();
            }
            episode += 1;
        }
        if t * config.checkpoints >= next_checkpoint * config.joint_steps {
            records.push(evaluate(&agents, next_checkpoint, t)?);
            next_checkpoint += 1;
        }
    }
    Ok(RunReport {
        method: match signal {
            Signal::Selfish => "iql".into(),
            Signal::Common => "iql-common".into(),
        },
        seed,
        theta_max: first.theta_max(),
        records,
        telemetry,
        signal_variance: Some(spread.variance()),
    })
}

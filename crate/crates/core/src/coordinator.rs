//! Slow timescale: finite-difference estimates of the gradient of the summed
//! Lagrangian values with respect to the constraint vector, and projected
//! descent on it.
//!
//! Each agent needs three evaluations per slow iteration: at its current
//! threshold, with its own threshold raised by `eps` (local partial), and
//! with the other agents' budget raised by `eps` (coupling partial).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cmdp::{build_cmdp, AgentPolicy, ConstraintVector, TabularCmdp};
use crate::env::{congestion, DeviceModel};
use crate::error::{DccError, Result};
use crate::joint::{joint_value, Member};
use crate::lp::{policy_from_occupancy, solve_cmdp_lp_warm};
use crate::ql::{train_constrained, OuterRecord, TrainConfig, WarmStart};
use crate::rng::{derive_seed, stream_with, Stream};

/// How a single agent's CMDP is solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Backend {
    QLearning(TrainConfig),
    /// Exact occupancy-measure LP; used by oracle checks.
    Lp,
}

impl Default for Backend {
    fn default() -> Self {
        Backend::QLearning(TrainConfig::default())
    }
}

/// Result of solving one agent's CMDP at one threshold pair.
#[derive(Debug, Clone)]
pub struct AgentEval {
    /// Lagrangian value `J + lambda (K - theta_i)`.
    pub j_lagrangian: f64,
    pub j: f64,
    pub k: f64,
    pub lambda: f64,
    pub policy: AgentPolicy,
    pub history: Vec<OuterRecord>,
    /// Policy-learning steps spent (0 for the LP).
    pub steps: usize,
    warm: Option<WarmStart>,
    basis: Option<Vec<usize>>,
}

/// Solver state reused by the next evaluation of the same agent.
#[derive(Debug, Clone, Default)]
pub struct AgentMemory {
    warm: Option<WarmStart>,
    basis: Option<Vec<usize>>,
}

impl AgentMemory {
    pub fn remember(&mut self, eval: &AgentEval) {
        self.warm = eval.warm.clone();
        self.basis = eval.basis.clone();
    }
}

/// Solves `cmdp` retargeted to `(theta_i, theta_minus_i)`.
pub fn evaluate_agent(
    cmdp: &TabularCmdp,
    theta_i: f64,
    theta_minus_i: f64,
    backend: &Backend,
    memory: &AgentMemory,
    seed: u64,
) -> Result<AgentEval> {
    let local = cmdp.retarget(theta_i, theta_minus_i)?;
    match backend {
        Backend::QLearning(cfg) => {
            let out = train_constrained(&local, theta_i, cfg, memory.warm.as_ref(), seed)?;
            Ok(AgentEval {
                j_lagrangian: out.j_lagrangian,
                j: out.j,
                k: out.k,
                lambda: out.lambda,
                warm: Some(out.warm_start()),
                policy: out.policy,
                history: out.history,
                steps: out.steps,
                basis: None,
            })
        }
        Backend::Lp => {
            let occ = solve_cmdp_lp_warm(&local, theta_i, memory.basis.as_deref())?;
            let policy = policy_from_occupancy(&local, &occ)?;
            Ok(AgentEval {
                j_lagrangian: occ.objective + occ.lambda * (occ.cost - theta_i),
                j: occ.objective,
                k: occ.cost,
                lambda: occ.lambda,
                policy,
                history: Vec::new(),
                steps: 0,
                warm: None,
                basis: Some(occ.basis.clone()),
            })
        }
    }
}

/// The three Lagrangian values of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub base: f64,
    /// Own threshold raised by `eps`.
    pub local: f64,
    /// Other agents' budget raised by `eps`.
    pub coupling: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct TripleEval {
    pub triple: Triple,
    pub base: AgentEval,
    /// `None` when the local partial is read off the multiplier.
    pub local: Option<AgentEval>,
    /// `None` when the base policy is re-evaluated instead of retrained.
    pub coupling: Option<AgentEval>,
}

impl TripleEval {
    pub fn steps(&self) -> usize {
        self.base.steps + self.local.as_ref().map_or(0, |e| e.steps) + self.coupling.as_ref().map_or(0, |e| e.steps)
    }
}

/// How the partial in the other agents' budget is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Solve the CMDP again with `theta_{-i} + eps`.
    Retrain,
    /// Keep the base policy and multiplier and re-evaluate them with
    /// `theta_{-i} + eps`. The budget of the other agents only enters the
    /// offload penalty, so the value moves by `K_i` times the change of the
    /// penalty.
    #[default]
    FixedPolicy,
}

/// Which of the perturbed evaluations are replaced by cheaper estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TripleOptions {
    /// Read the local value off the base multiplier: `base - eps lambda`.
    pub lambda_shortcut: bool,
    pub coupling: CouplingMode,
}

impl TripleOptions {
    /// Learner trainings behind one triple.
    pub fn trainings(&self) -> usize {
        1 + usize::from(!self.lambda_shortcut) + usize::from(self.coupling == CouplingMode::Retrain)
    }
}

/// Evaluates agent `i` at `theta`, `theta + eps e_i` and with `theta_{-i}`
/// raised by `eps`. All three use the same seed (common random numbers) and
/// start from the same solver memory.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_triple(
    cmdp: &TabularCmdp,
    i: usize,
    theta: &ConstraintVector,
    eps: f64,
    backend: &Backend,
    memory: &AgentMemory,
    seed: u64,
    options: TripleOptions,
) -> Result<TripleEval> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(DccError::Domain(format!("perturbation must be >= 0, got {eps}")));
    }
    let (ti, tm) = (theta.get(i), theta.others(i));
    if ti + eps > theta.theta_max() + 1e-12 {
        return Err(DccError::Domain(format!(
            "perturbed threshold {} exceeds theta_max {}",
            ti + eps,
            theta.theta_max()
        )));
    }
    let base = evaluate_agent(cmdp, ti, tm, backend, memory, seed)?;
    let (coupling, coupling_value) = match options.coupling {
        CouplingMode::Retrain => {
            let e = evaluate_agent(cmdp, ti, tm + eps, backend, memory, seed)?;
            let v = e.j_lagrangian;
            (Some(e), v)
        }
        CouplingMode::FixedPolicy => {
            let (tmax, alpha) = (theta.theta_max(), cmdp.alpha());
            let shift = congestion(1.0 + (tm + eps) / tmax, alpha) - congestion(1.0 + tm / tmax, alpha);
            (None, base.j_lagrangian + base.k * shift)
        }
    };
    let (local, local_value) = if options.lambda_shortcut {
        (None, base.j_lagrangian - eps * base.lambda)
    } else {
        let e = evaluate_agent(cmdp, (ti + eps).min(theta.theta_max()), tm, backend, memory, seed)?;
        let v = e.j_lagrangian;
        (Some(e), v)
    };
    Ok(TripleEval {
        triple: Triple {
            base: base.j_lagrangian,
            local: local_value,
            coupling: coupling_value,
            eps,
        },
        base,
        local,
        coupling,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub local: Vec<f64>,
    pub coupling: Vec<f64>,
    /// `g_i = local_i + sum_{j != i} coupling_j`.
    pub gradient: Vec<f64>,
}

pub fn assemble_gradient(triples: &[Triple]) -> Result<GradientEstimate> {
    let eps = triples
        .first()
        .ok_or_else(|| DccError::Contract("no triples to assemble".into()))?
        .eps;
    if !(eps > 0.0) {
        return Err(DccError::Domain(format!("perturbation must be positive, got {eps}")));
    }
    if triples.iter().any(|t| t.eps != eps) {
        return Err(DccError::Contract("triples were evaluated with different perturbations".into()));
    }
    let local: Vec<f64> = triples.iter().map(|t| (t.local - t.base) / eps).collect();
    let coupling: Vec<f64> = triples.iter().map(|t| (t.coupling - t.base) / eps).collect();
    let total: f64 = coupling.iter().sum();
    let gradient = local.iter().zip(&coupling).map(|(l, c)| l + total - c).collect();
    Ok(GradientEstimate { local, coupling, gradient })
}

/// Step sizes `alpha_n = alpha0 / (n+1)` and perturbation scales
/// `c_n = c0 theta_max / (n+1)^(1/4)`, or both held at their initial value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlowSchedule {
    pub alpha0: f64,
    /// Perturbation scale as a fraction of `theta_max`.
    pub c0: f64,
    pub constant: bool,
}

impl Default for SlowSchedule {
    fn default() -> Self {
        SlowSchedule {
            alpha0: 0.25,
            c0: 0.05,
            constant: true,
        }
    }
}

impl SlowSchedule {
    pub const STEP_EXPONENT: f64 = 1.0;
    pub const SCALE_EXPONENT: f64 = 0.25;

    pub fn step(&self, n: usize) -> f64 {
        if self.constant {
            self.alpha0
        } else {
            self.alpha0 / (n as f64 + 1.0).powf(Self::STEP_EXPONENT)
        }
    }

    pub fn scale(&self, n: usize, theta_max: f64) -> f64 {
        let c = self.c0 * theta_max;
        if self.constant {
            c
        } else {
            c / (n as f64 + 1.0).powf(Self::SCALE_EXPONENT)
        }
    }

    /// `sum alpha_n = inf` and `sum (alpha_n / c_n)^2 < inf` for the
    /// decaying forms, read off the exponents of the power laws.
    pub fn satisfies_step_conditions() -> bool {
        let divergent = Self::STEP_EXPONENT <= 1.0;
        let ratio = 2.0 * (Self::STEP_EXPONENT - Self::SCALE_EXPONENT);
        divergent && ratio > 1.0
    }

    /// Perturbation `|N(0, c_n)|`, clipped below at `c_n / 10`.
    pub fn sample_eps<R: Rng + ?Sized>(&self, n: usize, theta_max: f64, rng: &mut R) -> f64 {
        let c = self.scale(n, theta_max);
        let z: f64 = Normal::new(0.0, c).expect("scale is positive").sample(rng);
        z.abs().max(c / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.c0 > 0.0) {
            return Err(DccError::Config("slow schedule constants must be positive".into()));
        }
        Ok(())
    }
}

/// `theta <- clamp(theta - alpha_n g, 0, theta_max)`.
pub fn theta_step(theta: &ConstraintVector, g: &GradientEstimate, n: usize, schedule: &SlowSchedule) -> Result<ConstraintVector> {
    if g.gradient.len() != theta.len() {
        return Err(DccError::Contract(format!("{} gradient entries for {} agents", g.gradient.len(), theta.len())));
    }
    let a = schedule.step(n);
    let next = theta.values().iter().zip(&g.gradient).map(|(t, gi)| t - a * gi).collect();
    ConstraintVector::projected(next, theta.theta_max())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DccConfig {
    pub slow_iters: usize,
    pub schedule: SlowSchedule,
    pub backend: Backend,
    /// Starting thresholds, one per agent, or one value broadcast to all.
    pub initial_theta: Vec<f64>,
    pub triple: TripleOptions,
    /// Truncation of the exact joint evaluation (`gamma^t < tol`).
    pub joint_tol: f64,
}

impl Default for DccConfig {
    fn default() -> Self {
        DccConfig {
            slow_iters: 5,
            schedule: SlowSchedule::default(),
            backend: Backend::default(),
            initial_theta: vec![0.0],
            triple: TripleOptions::default(),
            joint_tol: 1e-6,
        }
    }
}

impl DccConfig {
    fn initial(&self, n: usize, theta_max: f64) -> Result<ConstraintVector> {
        let theta = match self.initial_theta.len() {
            1 => vec![self.initial_theta[0]; n],
            m if m == n => self.initial_theta.clone(),
            m => return Err(DccError::Config(format!("{m} initial thresholds for {n} agents"))),
        };
        ConstraintVector::new(theta, theta_max)
    }
}

/// State of the system after one slow iteration's base evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: Vec<f64>,
    /// Perturbation used for the gradient (0 on the final record).
    pub eps: f64,
    pub j: Vec<f64>,
    pub k: Vec<f64>,
    pub lambda: Vec<f64>,
    pub j_lagrangian: Vec<f64>,
    /// Gradient applied after this record (empty on the final record).
    pub gradient: Vec<f64>,
    /// Exact discounted true joint cost of the composed base policies.
    pub joint_reward: f64,
    pub offload_frequency: f64,
    /// Policy-learning steps spent up to and including this iteration.
    pub steps: usize,
}

/// Per-agent training telemetry row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub agent_id: usize,
    pub outer_iter: usize,
    pub lambda: f64,
    pub j_hat: f64,
    pub k_hat: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub theta_max: f64,
    /// `slow_iters + 1` records; the last one evaluates the final thresholds.
    pub records: Vec<IterationRecord>,
    pub telemetry: Vec<TelemetryRow>,
    /// Variance of the learners' reward signal (baselines only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_variance: Option<f64>,
}

impl RunReport {
    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// Builds one base CMDP per agent; thresholds are filled in by retargeting.
pub fn agent_cmdps(models: &[DeviceModel]) -> Result<Vec<TabularCmdp>> {
    models.iter().map(|m| build_cmdp(m, 0.0, 0.0)).collect()
}

fn check_models(models: &[DeviceModel]) -> Result<()> {
    let first = models.first().ok_or_else(|| DccError::Config("no agents".into()))?;
    if models
        .iter()
        .any(|m| m.discount != first.discount || m.penalty_alpha != first.penalty_alpha)
    {
        return Err(DccError::Config("all agents must share the discount and the penalty exponent".into()));
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn map_agents<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_agents<T>(n: usize, f: impl Fn(usize) -> Result<T>) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}

/// Runs the slow timescale for `config.slow_iters` iterations from the
/// configured initial thresholds.
pub fn run_dcc(models: &[DeviceModel], config: &DccConfig, seed: u64) -> Result<RunReport> {
    check_models(models)?;
    let cmdps = agent_cmdps(models)?;
    run_dcc_on(&cmdps, config, seed)
}

/// [`run_dcc`] on prebuilt agent CMDPs.
pub fn run_dcc_on(cmdps: &[TabularCmdp], config: &DccConfig, seed: u64) -> Result<RunReport> {
    config.schedule.validate()?;
    let n = cmdps.len();
    let theta_max = cmdps.first().ok_or_else(|| DccError::Config("no agents".into()))?.theta_max();
    let mut theta = config.initial(n, theta_max)?;
    let mut memories = vec![AgentMemory::default(); n];
    let mut perturb = stream_with(seed, 0, Stream::Perturbation, 0);
    let mut records = Vec::with_capacity(config.slow_iters + 1);
    let mut telemetry = Vec::new();
    let mut steps = 0;
    for it in 0..=config.slow_iters {
        let last = it == config.slow_iters;
        let eps = if last { 0.0 } else { config.schedule.sample_eps(it, theta_max, &mut perturb) };
        let agent_seed = |i: usize| derive_seed(&[seed, i as u64, it as u64]);
        let evals: Vec<(AgentEval, Option<Triple>, usize)> = map_agents(n, |i| {
            if last {
                let base = evaluate_agent(&cmdps[i], theta.get(i), theta.others(i), &config.backend, &memories[i], agent_seed(i))?;
                let steps = base.steps;
                return Ok((base, None, steps));
            }
            // near theta_max the forward difference is taken one step lower
            let mut at = theta.clone();
            if at.get(i) + eps > theta_max {
                let mut v = at.values().to_vec();
                v[i] = (theta_max - eps).max(0.0);
                at = ConstraintVector::new(v, theta_max)?;
            }
            let t = evaluate_triple(&cmdps[i], i, &at, eps, &config.backend, &memories[i], agent_seed(i), config.triple)?;
            let steps = t.steps();
            Ok((t.base, Some(t.triple), steps))
        })
        .map_err(|e| e.at_iteration(it))?;
        for (i, (base, _, spent)) in evals.iter().enumerate() {
            for h in &base.history {
                telemetry.push(TelemetryRow {
                    iteration: it,
                    agent_id: i,
                    outer_iter: h.outer_iter,
                    lambda: h.lambda,
                    j_hat: h.j_hat,
                    k_hat: h.k_hat,
                    epsilon: h.epsilon,
                });
            }
            steps += spent;
            memories[i].remember(base);
        }
        let bases: Vec<&AgentEval> = evals.iter().map(|e| &e.0).collect();
        let members: Vec<Member> = cmdps.iter().zip(&bases).map(|(c, e)| Member::new(c, &e.policy)).collect();
        let joint = joint_value(&members, config.joint_tol).map_err(|e| e.at_iteration(it))?;
        let mut next = None;
        let mut gradient = Vec::new();
        if !last {
            let triples: Vec<Triple> = evals.iter().filter_map(|e| e.1).collect();
            let g = assemble_gradient(&triples).map_err(|e| e.at_iteration(it))?;
            next = Some(theta_step(&theta, &g, it, &config.schedule)?);
            gradient = g.gradient;
        }
        records.push(IterationRecord {
            iteration: it,
            theta: theta.values().to_vec(),
            eps,
            j: bases.iter().map(|e| e.j).collect(),
            k: bases.iter().map(|e| e.k).collect(),
            lambda: bases.iter().map(|e| e.lambda).collect(),
            j_lagrangian: bases.iter().map(|e| e.j_lagrangian).collect(),
            gradient,
            joint_reward: joint.reward,
            offload_frequency: joint.offload_frequency,
            steps,
        });
        if let Some(t) = next {
            theta = t;
        }
    }
    Ok(RunReport {
        method: match config.backend {
            Backend::QLearning(_) => "dcc-ql".into(),
            Backend::Lp => "dcc-lp".into(),
        },
        seed,
        theta_max,
        records,
        telemetry,
        signal_variance: None,
    })
}

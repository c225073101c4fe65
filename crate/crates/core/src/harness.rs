//! Experiment plumbing: instance sampling, normalization, statistics and
//! result files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_iql, train_iql_common, IqlConfig};
use crate::cmdp::{build_cmdp, discounted_value, decomposition_error_bound, offload_probability, stationary_distribution};
use crate::coordinator::{agent_cmdps, run_dcc, Backend, DccConfig, RunReport};
use crate::env::{check_crowd_incentive, penalty_derivative, DeviceModel, MarkovChain};
use crate::error::{DccError, Result};
use crate::joint::{joint_value, simulate_joint, Member};
use crate::lp::{policy_from_occupancy, solve_cmdp_lp, OccupancyMeasure};
use crate::rng::{derive_seed, stream, stream_with, Stream, StreamRng};

/// Value sets the device parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceSets {
    pub min_h: Vec<i32>,
    pub max_h: Vec<i32>,
    pub min_c: Vec<i32>,
    pub max_c: Vec<i32>,
    #[serde(rename = "M")]
    pub aoi_cap: u32,
    #[serde(rename = "B")]
    pub battery_cap: i32,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for InstanceSets {
    fn default() -> Self {
        InstanceSets {
            min_h: vec![0, 1],
            max_h: vec![1, 2, 3],
            min_c: vec![1],
            max_c: vec![5, 7, 10],
            aoi_cap: 15,
            battery_cap: 15,
            gamma: 0.95,
            alpha: 1.0,
        }
    }
}

impl InstanceSets {
    fn model(&self, min_h: i32, max_h: i32, min_c: i32, max_c: i32) -> Result<DeviceModel> {
        DeviceModel::new(
            self.aoi_cap,
            self.battery_cap,
            MarkovChain::birth_death(min_h, max_h)?,
            MarkovChain::birth_death(min_c, max_c)?,
            self.alpha,
            self.gamma,
        )
    }

    /// All valid combinations, in set order.
    pub fn valid_models(&self) -> Result<Vec<DeviceModel>> {
        let mut out = Vec::new();
        for &a in &self.min_h {
            for &b in &self.max_h {
                for &c in &self.min_c {
                    for &d in &self.max_c {
                        if b < a || d < c {
                            continue;
                        }
                        let m = self.model(a, b, c, d)?;
                        if check_crowd_incentive(&m) {
                            out.push(m);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Draws `n` device models, one per agent, uniformly from the value sets.
/// Draws with `max_H < min_H` or failing the crowd-incentive check are
/// rejected.
pub fn sample_instances(sets: &InstanceSets, n: usize, seed: u64) -> Result<Vec<DeviceModel>> {
    if n == 0 {
        return Err(DccError::Domain("at least one instance is needed".into()));
    }
    if sets.valid_models()?.is_empty() {
        return Err(DccError::Config("no combination of the value sets passes validation".into()));
    }
    let mut rng = stream(seed, 0, Stream::Instances);
    let pick = |v: &[i32], rng: &mut _| -> Result<i32> {
        v.choose(rng).copied().ok_or_else(|| DccError::Config("empty value set".into()))
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (a, b) = (pick(&sets.min_h, &mut rng)?, pick(&sets.max_h, &mut rng)?);
        let (c, d) = (pick(&sets.min_c, &mut rng)?, pick(&sets.max_c, &mut rng)?);
        if b < a || d < c {
            continue;
        }
        let m = sets.model(a, b, c, d)?;
        if check_crowd_incentive(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// `raw / baseline`, elementwise.
pub fn normalize_rewards(raw: &[f64], baseline: f64) -> Result<Vec<f64>> {
    if baseline == 0.0 || !baseline.is_finite() {
        return Err(DccError::Domain(format!("cannot normalize by {baseline}")));
    }
    Ok(raw.iter().map(|r| r / baseline).collect())
}

/// One-sided paired t-test of `mean(a - b) < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test_less(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if a.len() != b.len() {
        return Err(DccError::Contract(format!("paired samples of sizes {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(DccError::Domain("a paired test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let p = if mean < 0.0 { 0.0 } else { 1.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(PairedTest { n, mean_diff: mean, t, p_value: p });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| DccError::Internal(e.to_string()))?;
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p_value: dist.cdf(t),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Settings of the LP verification experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Instances per penalty exponent.
    pub instances: usize,
    pub eps: f64,
    pub gradient_alphas: Vec<f64>,
    pub bound_alphas: Vec<f64>,
    pub bound_agents: usize,
    /// Monte Carlo episodes for the empirical joint value.
    pub episodes: usize,
    /// Thresholds are drawn uniformly from this fraction range of `theta_max`.
    pub theta_range: (f64, f64),
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            instances: 15,
            eps: 1e-5,
            gradient_alphas: vec![1.0, 2.0],
            bound_alphas: vec![0.5, 2.0, 3.0],
            bound_agents: 10,
            episodes: 400,
            theta_range: (0.05, 0.6),
        }
    }
}

/// Single LP solve settings, in discounted units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpSolveConfig {
    pub theta_i: f64,
    pub theta_minus_i: f64,
}

impl Default for LpSolveConfig {
    fn default() -> Self {
        LpSolveConfig {
            theta_i: 6.0,
            theta_minus_i: 6.0,
        }
    }
}

/// Everything an experiment needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub instances: InstanceSets,
    /// Small instances for the LP experiments.
    pub oracle_instances: InstanceSets,
    pub n_agents: usize,
    /// System sizes of the scalability experiment.
    pub sizes: Vec<usize>,
    pub dcc: DccConfig,
    pub iql: IqlConfig,
    /// Give IQL as many policy-learning steps as DCC spends.
    pub match_steps: bool,
    pub verify: VerifyConfig,
    pub lp: LpSolveConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            instances: InstanceSets::default(),
            oracle_instances: InstanceSets {
                min_h: vec![0, 1],
                max_h: vec![1, 2],
                min_c: vec![1],
                max_c: vec![2, 3],
                aoi_cap: 4,
                battery_cap: 3,
                ..InstanceSets::default()
            },
            n_agents: 10,
            sizes: vec![10, 20, 50],
            dcc: DccConfig::default(),
            iql: IqlConfig::default(),
            match_steps: true,
            verify: VerifyConfig::default(),
            lp: LpSolveConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Scales every learning budget down by 10.
    pub fn fast(mut self) -> Self {
        if let Backend::QLearning(t) = &mut self.dcc.backend {
            t.budget /= 10;
        }
        self.iql.joint_steps = (self.iql.joint_steps / 10).max(1);
        self
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Policy-learning steps one DCC agent spends in a full run.
    pub fn dcc_steps_per_agent(&self) -> usize {
        match &self.dcc.backend {
            Backend::QLearning(t) => t.steps_per_outer() * t.outer_iters * (self.dcc.triple.trainings() * self.dcc.slow_iters + 1),
            Backend::Lp => 0,
        }
    }

    /// IQL settings, with the step count matched to DCC when requested.
    pub fn iql_config(&self) -> IqlConfig {
        let mut cfg = self.iql.clone();
        let dcc = self.dcc_steps_per_agent();
        if self.match_steps && dcc > 0 {
            cfg.joint_steps = dcc;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DccQl,
    Iql,
    IqlCommon,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DccQl => "dcc-ql",
            Method::Iql => "iql",
            Method::IqlCommon => "iql-common",
        }
    }
}

pub fn run_method(config: &ExperimentConfig, method: Method, models: &[DeviceModel], seed: u64) -> Result<RunReport> {
    match method {
        Method::DccQl => run_dcc(models, &config.dcc, seed),
        Method::Iql => train_iql(models, &config.iql_config(), seed),
        Method::IqlCommon => train_iql_common(models, &config.iql_config(), seed),
    }
}

/// Joint reward of DCC's first evaluation, the unit of normalized rewards.
pub fn normalization_baseline(config: &ExperimentConfig, models: &[DeviceModel], seed: u64) -> Result<f64> {
    let first = DccConfig {
        slow_iters: 0,
        ..config.dcc.clone()
    };
    let report = run_dcc(models, &first, seed)?;
    Ok(report.records[0].joint_reward)
}

/// Runs `f` for every seed on a pool capped by `DCC_THREADS`, keeping seed
/// order.
pub fn for_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("DCC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            builder = builder.num_threads(n.max(1));
        }
        let pool = builder.build().map_err(|e| DccError::Internal(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// `runs` consecutive seeds starting at `seed`.
pub fn seeds(seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|r| seed.wrapping_add(r)).collect()
}

/// One slow iteration (DCC) or checkpoint (IQL) of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub seed: u64,
    pub config_hash: String,
    pub method: String,
    pub n_agents: usize,
    pub iteration: usize,
    pub steps: usize,
    pub joint_reward: f64,
    pub normalized_reward: f64,
    pub offload_frequency: f64,
}

/// Per-agent state of a DCC slow iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub seed: u64,
    pub config_hash: String,
    pub iteration: usize,
    pub agent_id: usize,
    pub theta: f64,
    pub j: f64,
    pub k: f64,
    pub lambda: f64,
    pub j_lagrangian: f64,
    /// Empty on the final iteration.
    pub gradient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryCsvRow {
    pub seed: u64,
    pub config_hash: String,
    pub iteration: usize,
    pub agent_id: usize,
    pub outer_iter: usize,
    pub lambda: f64,
    pub j_hat: f64,
    pub k_hat: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRow {
    pub seed: u64,
    pub config_hash: String,
    pub method: String,
    pub n_agents: usize,
    pub steps: usize,
    pub final_reward: f64,
    pub normalized_reward: f64,
    pub offload_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub seed: u64,
    pub config_hash: String,
    pub instance: usize,
    pub alpha: f64,
    pub states: usize,
    pub theta_i: f64,
    pub theta_minus_i: f64,
    pub eps: f64,
    pub lambda: f64,
    pub k: f64,
    /// Forward difference in the agent's own threshold.
    pub local_fd: f64,
    /// Backward difference in the agent's own threshold.
    pub local_fd_left: f64,
    /// `-lambda*`.
    pub local_analytic: f64,
    pub coupling_fd: f64,
    pub coupling_fd_left: f64,
    /// `K_i d'(1 + theta_{-i} / theta_max) / theta_max`.
    pub coupling_analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub seed: u64,
    pub config_hash: String,
    pub instance: usize,
    pub alpha: f64,
    pub n_agents: usize,
    /// Exact discounted true joint cost.
    pub joint_exact: f64,
    /// Monte Carlo estimate of the same quantity.
    pub joint_mc: f64,
    pub std_error: f64,
    /// Sum of the agents' approximated values.
    pub approx: f64,
    pub abs_error_exact: f64,
    pub abs_error_mc: f64,
    /// Signed bound; its magnitude is the error allowance.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpRow {
    pub seed: u64,
    pub config_hash: String,
    pub instance: usize,
    pub states: usize,
    pub theta_i: f64,
    pub theta_minus_i: f64,
    pub objective: f64,
    pub cost: f64,
    pub lambda: f64,
    pub binding: bool,
    pub pivots: usize,
}

fn trajectory(report: &RunReport, hash: &str, n_agents: usize, baseline: f64) -> Result<Vec<TrajectoryRow>> {
    let raw: Vec<f64> = report.records.iter().map(|r| r.joint_reward).collect();
    let norm = normalize_rewards(&raw, baseline)?;
    Ok(report
        .records
        .iter()
        .zip(norm)
        .map(|(r, nr)| TrajectoryRow {
            seed: report.seed,
            config_hash: hash.to_string(),
            method: report.method.clone(),
            n_agents,
            iteration: r.iteration,
            steps: r.steps,
            joint_reward: r.joint_reward,
            normalized_reward: nr,
            offload_frequency: r.offload_frequency,
        })
        .collect())
}

fn agent_rows(report: &RunReport, hash: &str) -> Vec<AgentRow> {
    let mut out = Vec::new();
    for r in &report.records {
        for i in 0..r.theta.len() {
            out.push(AgentRow {
                seed: report.seed,
                config_hash: hash.to_string(),
                iteration: r.iteration,
                agent_id: i,
                theta: r.theta[i],
                j: r.j[i],
                k: r.k[i],
                lambda: r.lambda[i],
                j_lagrangian: r.j_lagrangian[i],
                gradient: r.gradient.get(i).copied(),
            });
        }
    }
    out
}

fn telemetry_rows(report: &RunReport, hash: &str) -> Vec<TelemetryCsvRow> {
    report
        .telemetry
        .iter()
        .map(|t| TelemetryCsvRow {
            seed: report.seed,
            config_hash: hash.to_string(),
            iteration: t.iteration,
            agent_id: t.agent_id,
            outer_iter: t.outer_iter,
            lambda: t.lambda,
            j_hat: t.j_hat,
            k_hat: t.k_hat,
            epsilon: t.epsilon,
        })
        .collect()
}

/// Output of one seed: named CSV tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SeedOutput {
    pub seed: u64,
    pub trajectory: Vec<TrajectoryRow>,
    pub agents: Vec<AgentRow>,
    pub telemetry: Vec<TelemetryCsvRow>,
    pub scalability: Vec<ScalabilityRow>,
    pub gradient: Vec<GradientRow>,
    pub bound: Vec<BoundRow>,
    pub lp: Vec<LpRow>,
    /// Learning-signal variance per IQL method.
    pub signal_variance: Vec<(String, f64)>,
}

/// Trains one method on `n_agents` sampled devices.
pub fn train_experiment(config: &ExperimentConfig, method: Method, seed: u64) -> Result<SeedOutput> {
    let hash = config.hash()?;
    let models = sample_instances(&config.instances, config.n_agents, seed)?;
    let report = run_method(config, method, &models, seed)?;
    let baseline = match method {
        Method::DccQl => report.records[0].joint_reward,
        _ => normalization_baseline(config, &models, seed)?,
    };
    let mut out = SeedOutput {
        seed,
        trajectory: trajectory(&report, &hash, models.len(), baseline)?,
        ..SeedOutput::default()
    };
    if method == Method::DccQl {
        out.agents = agent_rows(&report, &hash);
        out.telemetry = telemetry_rows(&report, &hash);
    }
    if let Some(v) = report.signal_variance {
        out.signal_variance.push((report.method.clone(), v));
    }
    Ok(out)
}

/// DCC-QL and IQL on the same devices, for the offload-frequency curves.
pub fn frequency_experiment(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let hash = config.hash()?;
    let models = sample_instances(&config.instances, config.n_agents, seed)?;
    let dcc = run_method(config, Method::DccQl, &models, seed)?;
    let iql = run_method(config, Method::Iql, &models, seed)?;
    let baseline = dcc.records[0].joint_reward;
    let mut trajectory_rows = trajectory(&dcc, &hash, models.len(), baseline)?;
    trajectory_rows.extend(trajectory(&iql, &hash, models.len(), baseline)?);
    Ok(SeedOutput {
        seed,
        trajectory: trajectory_rows,
        agents: agent_rows(&dcc, &hash),
        ..SeedOutput::default()
    })
}

/// Final rewards of all methods for every configured system size.
pub fn scalability_experiment(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let hash = config.hash()?;
    let mut out = SeedOutput { seed, ..SeedOutput::default() };
    for &n in &config.sizes {
        let models = sample_instances(&config.instances, n, seed)?;
        let mut baseline = None;
        for method in [Method::DccQl, Method::Iql, Method::IqlCommon] {
            let report = run_method(config, method, &models, seed)?;
            let base = *baseline.get_or_insert(report.records[0].joint_reward);
            let last = report
                .final_record()
                .ok_or_else(|| DccError::Internal("run produced no records".into()))?;
            out.scalability.push(ScalabilityRow {
                seed,
                config_hash: hash.clone(),
                method: report.method.clone(),
                n_agents: n,
                steps: last.steps,
                final_reward: last.joint_reward,
                normalized_reward: normalize_rewards(&[last.joint_reward], base)?[0],
                offload_frequency: last.offload_frequency,
            });
            if let Some(v) = report.signal_variance {
                out.signal_variance.push((format!("{}@{}", report.method, n), v));
            }
        }
    }
    Ok(out)
}

fn oracle_models(config: &ExperimentConfig, alpha: f64, n: usize, seed: u64) -> Result<Vec<DeviceModel>> {
    let sets = InstanceSets {
        alpha,
        ..config.oracle_instances.clone()
    };
    sample_instances(&sets, n, seed)
}

fn draw_theta(config: &ExperimentConfig, theta_max: f64, rng: &mut StreamRng) -> f64 {
    let (lo, hi) = config.verify.theta_range;
    rng.gen_range(lo..=hi) * theta_max
}

/// LP finite differences of one agent's value in its own threshold and in
/// the other agents' budget, next to their closed forms.
pub fn gradient_experiment(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let hash = config.hash()?;
    let eps = config.verify.eps;
    if !(eps > 0.0) {
        return Err(DccError::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut out = SeedOutput { seed, ..SeedOutput::default() };
    for (ai, &alpha) in config.verify.gradient_alphas.iter().enumerate() {
        let models = oracle_models(config, alpha, config.verify.instances, derive_seed(&[seed, ai as u64]))?;
        let mut rng = stream_with(seed, ai, Stream::Instances, 1);
        for (k, model) in models.iter().enumerate() {
            let cmdp = build_cmdp(model, 0.0, 0.0)?;
            let tm = cmdp.theta_max();
            let theta_i = draw_theta(config, tm, &mut rng);
            // a few other agents' worth of budget
            let theta_minus_i = 3.0 * draw_theta(config, tm, &mut rng);
            let value = |ti: f64, tmi: f64| -> Result<(f64, OccupancyMeasure)> {
                let occ = solve_cmdp_lp(&cmdp.retarget(ti, tmi)?, ti)?;
                Ok((occ.objective + occ.lambda * (occ.cost - ti), occ))
            };
            let (base, occ) = value(theta_i, theta_minus_i)?;
            let (up, _) = value(theta_i + eps, theta_minus_i)?;
            let (down, _) = value(theta_i - eps, theta_minus_i)?;
            let (cup, _) = value(theta_i, theta_minus_i + eps)?;
            let (cdown, _) = value(theta_i, theta_minus_i - eps)?;
            let slope = penalty_derivative(1.0 + theta_minus_i / tm, alpha)?;
            out.gradient.push(GradientRow {
                seed,
                config_hash: hash.clone(),
                instance: k,
                alpha,
                states: cmdp.len(),
                theta_i,
                theta_minus_i,
                eps,
                lambda: occ.lambda,
                k: occ.cost,
                local_fd: (up - base) / eps,
                local_fd_left: (base - down) / eps,
                local_analytic: -occ.lambda,
                coupling_fd: (cup - base) / eps,
                coupling_fd_left: (base - cdown) / eps,
                coupling_analytic: occ.cost * slope / tm,
            });
        }
    }
    Ok(out)
}

/// Error of the decomposed value against the true joint value for LP
/// policies composed from their stationary distributions.
pub fn bound_experiment(config: &ExperimentConfig, alphas: &[f64], seed: u64) -> Result<SeedOutput> {
    let hash = config.hash()?;
    let n = config.verify.bound_agents;
    let mut out = SeedOutput { seed, ..SeedOutput::default() };
    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut rng = stream_with(seed, ai, Stream::Instances, 2);
        for k in 0..config.verify.instances {
            let models = oracle_models(config, alpha, n, derive_seed(&[seed, ai as u64, k as u64]))?;
            let cmdps = agent_cmdps(&models)?;
            let tm = cmdps[0].theta_max();
            let theta: Vec<f64> = (0..n).map(|_| draw_theta(config, tm, &mut rng)).collect();
            let total: f64 = theta.iter().sum();
            let mut policies = Vec::with_capacity(n);
            for (i, c) in cmdps.iter().enumerate() {
                let local = c.retarget(theta[i], total - theta[i])?;
                let occ = solve_cmdp_lp(&local, theta[i])?;
                policies.push(policy_from_occupancy(&local, &occ)?);
            }
            let mus: Vec<Vec<f64>> = cmdps.iter().zip(&policies).map(|(c, p)| stationary_distribution(c, p)).collect();
            let freqs: Vec<f64> = policies.iter().zip(&mus).map(|(p, m)| offload_probability(p, m)).collect();
            let ftotal: f64 = freqs.iter().sum();
            let mut approx = 0.0;
            for i in 0..n {
                let c = cmdps[i].with_initial(mus[i].clone())?.with_expected_others(theta[i], ftotal - freqs[i])?;
                approx += discounted_value(&c, &policies[i])?.0;
            }
            let members: Vec<Member> = cmdps
                .iter()
                .zip(&policies)
                .zip(&mus)
                .map(|((c, p), m)| Member::new(c, p).starting_from(m))
                .collect();
            let exact = joint_value(&members, 1e-12)?;
            let gamma = cmdps[0].discount();
            let horizon = (1e-6f64.ln() / gamma.ln()).ceil() as usize;
            let mut sim = stream_with(seed, ai * 1_000 + k, Stream::Joint, 0);
            let mc = simulate_joint(&models, &members, config.verify.episodes, horizon, &mut sim)?;
            out.bound.push(BoundRow {
                seed,
                config_hash: hash.clone(),
                instance: k,
                alpha,
                n_agents: n,
                joint_exact: exact.reward,
                joint_mc: mc.mean,
                std_error: mc.std_error,
                approx,
                abs_error_exact: (exact.reward - approx).abs(),
                abs_error_mc: (mc.mean - approx).abs(),
                bound: decomposition_error_bound(&freqs, gamma, alpha)?,
            });
        }
    }
    Ok(out)
}

/// Solves the occupancy LP of sampled oracle instances at the configured
/// thresholds.
pub fn lp_experiment(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let hash = config.hash()?;
    let models = sample_instances(&config.oracle_instances, config.verify.instances, seed)?;
    let mut out = SeedOutput { seed, ..SeedOutput::default() };
    for (k, model) in models.iter().enumerate() {
        let (ti, tmi) = (config.lp.theta_i, config.lp.theta_minus_i);
        let cmdp = build_cmdp(model, ti, tmi)?;
        let occ = solve_cmdp_lp(&cmdp, ti)?;
        out.lp.push(LpRow {
            seed,
            config_hash: hash.clone(),
            instance: k,
            states: cmdp.len(),
            theta_i: ti,
            theta_minus_i: tmi,
            objective: occ.objective,
            cost: occ.cost,
            lambda: occ.lambda,
            binding: occ.binding(),
            pivots: occ.pivots,
        });
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and standard deviation of one metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub stdev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub entries: Vec<SummaryEntry>,
}

fn summarize(outputs: &[SeedOutput]) -> Vec<SummaryEntry> {
    use std::collections::BTreeMap;
    let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in outputs {
        let mut last: BTreeMap<(String, usize), &TrajectoryRow> = BTreeMap::new();
        for r in &o.trajectory {
            last.insert((r.method.clone(), r.n_agents), r);
        }
        for ((m, n), r) in last {
            metrics.entry(format!("{m}@{n}/final_normalized_reward")).or_default().push(r.normalized_reward);
            metrics.entry(format!("{m}@{n}/final_offload_frequency")).or_default().push(r.offload_frequency);
        }
        for r in &o.scalability {
            metrics.entry(format!("{}@{}/final_normalized_reward", r.method, r.n_agents)).or_default().push(r.normalized_reward);
            metrics.entry(format!("{}@{}/final_offload_frequency", r.method, r.n_agents)).or_default().push(r.offload_frequency);
        }
        for r in &o.gradient {
            metrics.entry(format!("alpha={}/local_abs_error", r.alpha)).or_default().push((r.local_fd - r.local_analytic).abs());
            metrics.entry(format!("alpha={}/coupling_abs_error", r.alpha)).or_default().push((r.coupling_fd - r.coupling_analytic).abs());
        }
        for r in &o.bound {
            metrics.entry(format!("alpha={}/abs_error_exact", r.alpha)).or_default().push(r.abs_error_exact);
            metrics.entry(format!("alpha={}/bound", r.alpha)).or_default().push(r.bound);
        }
        for r in &o.lp {
            metrics.entry("objective".into()).or_default().push(r.objective);
            metrics.entry("lambda".into()).or_default().push(r.lambda);
        }
        for (m, v) in &o.signal_variance {
            metrics.entry(format!("{m}/signal_variance")).or_default().push(*v);
        }
    }
    metrics
        .into_iter()
        .map(|(metric, xs)| {
            let (mean, stdev) = mean_std(&xs);
            SummaryEntry { metric, n: xs.len(), mean, stdev }
        })
        .collect()
}

/// Writes `<out>/<experiment>/<seed>/results.csv` (plus `agents.csv` and
/// `telemetry.csv` where present) and `<out>/<experiment>/summary.json`.
pub fn write_outputs(out: &Path, experiment: &str, config: &ExperimentConfig, outputs: &[SeedOutput]) -> Result<Summary> {
    let root = out.join(experiment);
    for o in outputs {
        let dir = root.join(o.seed.to_string());
        std::fs::create_dir_all(&dir)?;
        let results = dir.join("results.csv");
        if !o.scalability.is_empty() {
            write_csv(&results, &o.scalability)?;
        } else if !o.gradient.is_empty() {
            write_csv(&results, &o.gradient)?;
        } else if !o.bound.is_empty() {
            write_csv(&results, &o.bound)?;
        } else if !o.lp.is_empty() {
            write_csv(&results, &o.lp)?;
        } else {
            write_csv(&results, &o.trajectory)?;
        }
        if !o.agents.is_empty() {
            write_csv(&dir.join("agents.csv"), &o.agents)?;
        }
        if !o.telemetry.is_empty() {
            write_csv(&dir.join("telemetry.csv"), &o.telemetry)?;
        }
    }
    let summary = Summary {
        experiment: experiment.to_string(),
        config_hash: config.hash()?,
        seeds: outputs.iter().map(|o| o.seed).collect(),
        entries: summarize(outputs),
    };
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

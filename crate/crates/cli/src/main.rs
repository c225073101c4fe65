use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dcc_core::harness::{
    bound_experiment, for_seeds, frequency_experiment, gradient_experiment, lp_experiment, scalability_experiment,
    seeds, train_experiment, write_outputs, ExperimentConfig, Method, SeedOutput,
};

#[derive(Parser)]
#[command(name = "dcc", version, about = "Decentralized coordination experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; run r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    runs: usize,
    /// Scale learning budgets down by 10.
    #[arg(long)]
    fast: bool,
}

#[derive(Subcommand)]
enum Command {
    /// DCC with Q-learning agents.
    TrainDcc(Common),
    /// Independent Q-learning on the selfish reward.
    TrainIql(Common),
    /// Independent Q-learning on the common joint reward.
    TrainIqlCommon(Common),
    /// Solve the occupancy LP of sampled small instances.
    LpSolve(Common),
    /// LP finite differences against the multiplier and the penalty slope.
    VerifyGradient {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Decomposition error against the bound.
    VerifyBound {
        #[command(flatten)]
        common: Common,
        /// Penalty exponent; repeat for several. Defaults to the config.
        #[arg(long)]
        alpha: Vec<f64>,
    },
    /// Final normalized rewards of all methods across system sizes.
    Scalability(Common),
    /// Offload frequency of DCC-QL and IQL over training.
    Frequency(Common),
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    Ok(if common.fast { cfg.fast() } else { cfg })
}

fn run(
    common: &Common,
    name: &str,
    cfg: ExperimentConfig,
    f: impl Fn(&ExperimentConfig, u64) -> dcc_core::Result<SeedOutput> + Sync + Send,
) -> anyhow::Result<()> {
    if common.runs == 0 {
        anyhow::bail!("--runs must be positive");
    }
    let outputs = for_seeds(&seeds(common.seed, common.runs), |s| f(&cfg, s))?;
    let summary = write_outputs(&common.out, name, &cfg, &outputs)?;
    println!("{}: {} runs, config {}", name, outputs.len(), summary.config_hash);
    for e in &summary.entries {
        println!("  {:<48} mean {:>12.6} sd {:>12.6} (n={})", e.metric, e.mean, e.stdev, e.n);
    }
    println!("written to {}", common.out.join(name).display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainDcc(c) => run(&c, "train-dcc", load(&c)?, |cfg, s| train_experiment(cfg, Method::DccQl, s)),
        Command::TrainIql(c) => run(&c, "train-iql", load(&c)?, |cfg, s| train_experiment(cfg, Method::Iql, s)),
        Command::TrainIqlCommon(c) => {
            run(&c, "train-iql-common", load(&c)?, |cfg, s| train_experiment(cfg, Method::IqlCommon, s))
        }
        Command::LpSolve(c) => run(&c, "lp-solve", load(&c)?, lp_experiment),
        Command::VerifyGradient { common, eps } => {
            let mut cfg = load(&common)?;
            if let Some(e) = eps {
                cfg.verify.eps = e;
            }
            run(&common, "verify-gradient", cfg, gradient_experiment)
        }
        Command::VerifyBound { common, alpha } => {
            let mut cfg = load(&common)?;
            if !alpha.is_empty() {
                cfg.verify.bound_alphas = alpha;
            }
            let alphas = cfg.verify.bound_alphas.clone();
            run(&common, "verify-bound", cfg, move |cfg, s| bound_experiment(cfg, &alphas, s))
        }
        Command::Scalability(c) => run(&c, "scalability", load(&c)?, scalability_experiment),
        Command::Frequency(c) => run(&c, "frequency", load(&c)?, frequency_experiment),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use dcc_core::coordinator::Backend;
use dcc_core::env::{check_crowd_incentive, DeviceModel, MarkovChain};
use dcc_core::harness::{
    config_hash, gradient_experiment, lp_experiment, normalize_rewards, paired_t_test_less, run_method, sample_instances,
    train_experiment, write_outputs, ExperimentConfig, InstanceSets, Method,
};
use dcc_core::ql::TrainConfig;
use dcc_core::DccError;

#[test]
fn normalization_examples() {
    assert_eq!(normalize_rewards(&[4.0, 2.0, 8.0], 4.0).unwrap(), vec![1.0, 0.5, 2.0]);
    assert_eq!(normalize_rewards(&[3.0; 4], 3.0).unwrap(), vec![1.0; 4]);
    assert!(matches!(normalize_rewards(&[1.0], 0.0), Err(DccError::Domain(_))));
}

#[test]
fn sampling_is_reproducible_and_valid() {
    let sets = InstanceSets::default();
    let a = sample_instances(&sets, 12, 5).unwrap();
    let b = sample_instances(&sets, 12, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_instances(&sets, 12, 6).unwrap());
    for m in &a {
        assert_eq!(m.cost.min(), 1);
        assert!(m.harvest.max() >= m.harvest.min());
        assert_eq!((m.aoi_cap, m.battery_cap, m.discount), (15, 15, 0.95));
        assert!(check_crowd_incentive(m));
    }
    assert!(matches!(sample_instances(&sets, 0, 1), Err(DccError::Domain(_))));
}

#[test]
fn the_default_grid_has_valid_members() {
    // exhaustive pass over min_H x max_H x max_C, independent of the sampler
    let mut valid = 0;
    for hmin in [0, 1] {
        for hmax in [1, 2, 3] {
            for cmax in [5, 7, 10] {
                if hmax < hmin {
                    continue;
                }
                let m = DeviceModel::new(
                    15,
                    15,
                    MarkovChain::birth_death(hmin, hmax).unwrap(),
                    MarkovChain::birth_death(1, cmax).unwrap(),
                    1.0,
                    0.95,
                )
                .unwrap();
                valid += check_crowd_incentive(&m) as usize;
            }
        }
    }
    assert!(valid > 0);
    assert_eq!(InstanceSets::default().valid_models().unwrap().len(), valid);
}

#[test]
fn paired_test_matches_reference() {
    // reference: scipy.stats.ttest_rel(a, b, alternative="less")
    let a = [0.81, 0.84, 0.79, 0.90, 0.86, 0.83];
    let b = [0.88, 0.86, 0.85, 0.89, 0.92, 0.90];
    let t = paired_t_test_less(&a, &b).unwrap();
    assert!((t.t + 3.369738890020396).abs() < 1e-9);
    assert!((t.p_value - 0.009947686017950375).abs() < 1e-9);
    let flipped = paired_t_test_less(&b, &a).unwrap();
    assert!((flipped.p_value - (1.0 - t.p_value)).abs() < 1e-9);
}

#[test]
fn config_hash_tracks_content() {
    let a = ExperimentConfig::default();
    assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
    assert_eq!(config_hash(&a).unwrap().len(), 16);
    let b = ExperimentConfig { n_agents: 3, ..a.clone() };
    assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
}

#[test]
fn fast_scales_budgets() {
    let cfg = ExperimentConfig::default();
    let fast = cfg.clone().fast();
    let budget = |c: &ExperimentConfig| match &c.dcc.backend {
        Backend::QLearning(t) => t.budget,
        Backend::Lp => 0,
    };
    assert_eq!(budget(&cfg), 10 * budget(&fast));
    assert_eq!(fast.iql_config().joint_steps, fast.dcc_steps_per_agent());
}

#[test]
fn partial_config_files_fill_in_defaults() {
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"n_agents": 4, "iql": {"learning_rate": 0.1}}"#).unwrap();
    assert_eq!(cfg.n_agents, 4);
    assert_eq!(cfg.iql.learning_rate, 0.1);
    assert_eq!(cfg.iql.epsilon, 0.05);
    assert_eq!(cfg.sizes, vec![10, 20, 50]);
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_agents: 2,
        ..ExperimentConfig::default()
    };
    cfg.instances = cfg.oracle_instances.clone();
    cfg.dcc.slow_iters = 2;
    cfg.dcc.backend = Backend::QLearning(TrainConfig {
        budget: 2_000,
        outer_iters: 4,
        calibration_rollouts: 32,
        ..TrainConfig::default()
    });
    cfg.verify.instances = 3;
    cfg
}

#[test]
fn iql_budget_matches_dcc_steps() {
    let cfg = tiny();
    let models = sample_instances(&cfg.instances, cfg.n_agents, 1).unwrap();
    let report = run_method(&cfg, Method::DccQl, &models, 1).unwrap();
    let spent = report.final_record().unwrap().steps;
    assert_eq!(spent, cfg.n_agents * cfg.dcc_steps_per_agent());
    assert_eq!(cfg.iql_config().joint_steps, cfg.dcc_steps_per_agent());
}

fn read_tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_write_identical_files() {
    let cfg = tiny();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let outs: Vec<_> = [3, 4].iter().map(|&s| train_experiment(&cfg, Method::DccQl, s).unwrap()).collect();
        write_outputs(d.path(), "train-dcc", &cfg, &outs).unwrap();
        let outs: Vec<_> = [3].iter().map(|&s| gradient_experiment(&cfg, s).unwrap()).collect();
        write_outputs(d.path(), "verify-gradient", &cfg, &outs).unwrap();
    }
    let (a, b) = (read_tree(dirs[0].path()), read_tree(dirs[1].path()));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["train-dcc/3/results.csv", "train-dcc/3/agents.csv", "train-dcc/3/telemetry.csv", "train-dcc/summary.json"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
}

#[test]
fn every_row_carries_seed_and_hash() {
    let cfg = tiny();
    let hash = cfg.hash().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = lp_experiment(&cfg, 8).unwrap();
    write_outputs(dir.path(), "lp-solve", &cfg, &[out]).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("lp-solve/8/results.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(&headers[0], "seed");
    assert_eq!(&headers[1], "config_hash");
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], "8");
        assert_eq!(&rec[1], hash);
        rows += 1;
    }
    assert_eq!(rows, 3);
}

#[test]
fn readme_config_example_parses() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("```json").nth(1).unwrap().split("```").next().unwrap();
    let cfg: ExperimentConfig = serde_json::from_str(block).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use teamopt::config::{Algorithm, ExperimentConfig, ModeName};
use teamopt::formats::{self, MetricsRow};
use teamopt::harness::{self, SweepAxis};
use teamopt_core::belief::CommonBelief;
use teamopt_core::generate::{random_model, RandomModel};
use teamopt_core::sample::stream_rng;
use teamopt_core::teamgrid::{make_env, render, EnvParams};

fn small_config(out: &Path, algorithm: Algorithm, mode: ModeName) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.algorithm = algorithm;
    c.broadcast_mode = mode;
    c.seeds = vec![3, 4];
    c.episodes = 60;
    c.out = out.to_path_buf();
    c
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const OUTPUTS: [&str; 5] = ["metrics_seed3.csv", "metrics_seed4.csv", "aggregate.csv", "summary.json", "checkpoint_seed3.json"];

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for mode in [ModeName::Always, ModeName::Intermittent] {
        harness::run(&small_config(a.path(), Algorithm::Doc, mode)).unwrap();
        harness::run(&small_config(b.path(), Algorithm::Doc, mode)).unwrap();
        for f in OUTPUTS {
            assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs ({mode:?})");
        }
    }
}

#[test]
fn aggregates_are_recomputable_from_metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), Algorithm::Doc, ModeName::Intermittent);
    let summary = harness::run(&config).unwrap();
    let per_seed: Vec<Vec<MetricsRow>> =
        config.seeds.iter().map(|&s| harness::read_metrics_file(&harness::metrics_path(dir.path(), s)).unwrap()).collect();
    let again = dir.path().join("again.csv");
    harness::write_aggregate(&again, &harness::aggregate(&per_seed, config.window()).unwrap()).unwrap();
    assert_eq!(read(&again), read(&dir.path().join("aggregate.csv")));
    assert_eq!(harness::summarize(&per_seed).unwrap(), summary);
}

#[test]
fn single_value_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = small_config(&dir.path().join("sweep"), Algorithm::Doc, ModeName::Intermittent);
    base.seeds = vec![1];
    let rows = harness::sweep(&base, SweepAxis::BroadcastPenalty, &[-0.25]).unwrap();
    let mut direct = base.clone();
    direct.learner.broadcast_penalty = -0.25;
    direct.out = dir.path().join("direct");
    let summary = harness::run(&direct).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean_return, summary.mean_final_return);
    let swept = dir.path().join("sweep").join("broadcast_penalty=-0.25");
    assert_eq!(read(&swept.join("metrics_seed1.csv")), read(&direct.out.join("metrics_seed1.csv")));
}

#[test]
fn every_algorithm_runs() {
    for algorithm in [
        Algorithm::Doc,
        Algorithm::ActorCriticCentralized,
        Algorithm::ActorCriticDecentralized,
        Algorithm::Random,
        Algorithm::Planner,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(dir.path(), algorithm, ModeName::Always);
        c.episodes = 20;
        let s = harness::run(&c).unwrap();
        assert_eq!(s.episodes, 20);
        assert!(s.mean_final_return.is_finite(), "{algorithm:?}");
    }
}

#[test]
fn switch_renders() {
    let spec = make_env("switch", EnvParams::defaults("switch")).unwrap();
    assert_eq!(render(&spec, &spec.initial_state()), "#####\n#S#g#\n#.D.#\n#^#^#\n#####\n");
}

#[test]
fn belief_dump_round_trips() {
    let b = CommonBelief::from_probs(vec![0.125, 0.0, 0.875], 4).unwrap();
    let text = formats::belief_dump(&b);
    assert_eq!(text, "0 1.2500000000000000e-1\n2 8.7500000000000000e-1\n");
    let back = formats::parse_belief_dump(&text, 3).unwrap();
    assert_eq!(back.probs(), b.probs());
}

#[test]
fn model_file_round_trips() {
    let mut rng = stream_rng(8, 0);
    let mut spec = RandomModel::new(vec![2, 3], vec![2, 2], 0.9);
    spec.broadcast_penalty = -0.2;
    let m = random_model(&mut rng, &spec);
    let mut buf = Vec::new();
    formats::write_model(&m, &mut buf).unwrap();
    let back = formats::read_model(buf.as_slice()).unwrap();
    let mut again = Vec::new();
    formats::write_model(&back, &mut again).unwrap();
    assert_eq!(buf, again);
    assert!(back.validate().is_empty());
    for s in 0..m.num_states() {
        for a in 0..m.num_actions() {
            assert_eq!(m.transition_row(s, a), back.transition_row(s, a));
            assert_eq!(m.expected_reward(s, a), back.expected_reward(s, a));
        }
    }
}

#[test]
fn cli_export_render_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("switch.json");
    let bin = env!("CARGO_BIN_EXE_teamopt");
    let out = Command::new(bin)
        .args(["export-env", "--env", "switch", "--agents", "1", "--render", "--out"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("#S#g#"));
    let out = Command::new(bin).arg("validate").arg(&model).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));

    fs::write(dir.path().join("bad.json"), "{}").unwrap();
    let out = Command::new(bin).arg("validate").arg(dir.path().join("bad.json")).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_teamopt"))
        .args(["train", "--seed", "0", "--broadcast-mode", "always", "--set", "learner.alpha_q=3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learner.alpha_q"));
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5, 1usize..30).prop_flat_map(|(seeds, n)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), seeds))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregate_matches_direct_statistics(returns in rows_strategy(), window in 1usize..12) {
        let per_seed: Vec<Vec<MetricsRow>> = returns
            .iter()
            .enumerate()
            .map(|(k, r)| {
                r.iter()
                    .enumerate()
                    .map(|(e, &g)| MetricsRow {
                        seed: k as u64,
                        episode: e,
                        total_return: g,
                        steps: 1,
                        broadcast_rate: 0.5,
                        option_switches: 0,
                        wall_time_ms: 0,
                    })
                    .collect()
            })
            .collect();
        let agg = harness::aggregate(&per_seed, window).unwrap();
        let n = returns[0].len();
        prop_assert_eq!(agg.len(), n.div_ceil(window));
        for row in &agg {
            let means: Vec<f64> = returns
                .iter()
                .map(|r| r[row.window_start..=row.window_end].iter().sum::<f64>() / (row.window_end - row.window_start + 1) as f64)
                .collect();
            let k = means.len() as f64;
            let mean = means.iter().sum::<f64>() / k;
            let sd = if means.len() > 1 {
                (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            prop_assert!((row.mean_return - mean).abs() <= 1e-12);
            prop_assert!((row.sd_return - sd).abs() <= 1e-9);
        }
    }
}

#[test]
fn cli_oracle_evaluates_intermittent_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_teamopt");
    let model = dir.path().join("switch.json");
    let out = Command::new(bin).args(["export-env", "--env", "switch", "--out"]).arg(&model).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let out = Command::new(bin)
        .args(["train", "--seed", "0", "--broadcast-mode", "intermittent", "--episodes", "30", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for mode in ["intermittent", "always"] {
        let out = Command::new(bin)
            .args(["oracle", "--policy", "greedy", "--episodes", "50", "--broadcast-mode", mode, "--model"])
            .arg(&model)
            .arg("--checkpoint")
            .arg(run.join("checkpoint_seed0.json"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("mean "));
    }
}

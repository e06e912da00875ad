//! Training runs, sweeps, aggregation and plot data.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use teamopt_core::belief::BroadcastMode;
use teamopt_core::learner::{ActorCritic, CriticKind, Environment, Learner, LearnerError, ModelEnv, RunRngs};
use teamopt_core::math;
use teamopt_core::planner::{Planner, PlannerError};
use teamopt_core::teamgrid::{export_tabular, GridError, GridSpec, TeamGrid};
use teamopt_core::OptionPool;
use thiserror::Error;

use crate::config::{Algorithm, ConfigError, ExperimentConfig};
use crate::formats::{self, Checkpoint, FormatError, MetricsRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("seed {seed}: {source}")]
    Learner { seed: u64, source: LearnerError },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("metrics files disagree: {0}")]
    Mismatch(String),
    #[error("sweep needs at least one value")]
    EmptySweep,
}

fn output(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path).map(BufWriter::new).map_err(|source| HarnessError::Output { path: path.into(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(FormatError::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|source| HarnessError::Output { path: path.into(), source })
}

/// Per-seed outcome of a run.
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub learner: Option<Learner>,
}

fn row(seed: u64, m: &teamopt_core::learner::EpisodeMetrics, started: Option<Instant>) -> MetricsRow {
    MetricsRow {
        seed,
        episode: m.episode,
        total_return: m.total_return,
        steps: m.steps,
        broadcast_rate: m.broadcast_rate,
        option_switches: m.option_switches,
        wall_time_ms: started.map_or(0, |t| t.elapsed().as_millis() as u64),
    }
}

/// Runs one seed of `config` on `spec` without touching the filesystem.
pub fn run_seed(config: &ExperimentConfig, spec: &GridSpec, seed: u64) -> Result<SeedRun, HarnessError> {
    let lc = config.learner_config();
    let learn_err = |source| HarnessError::Learner { seed, source };
    let mut rngs = RunRngs::new(seed);
    let mut rows = Vec::with_capacity(config.episodes);
    let clock = || config.timing.then(Instant::now);
    match config.algorithm {
        Algorithm::Doc => {
            let mut env = TeamGrid::new(spec.clone())?.with_kappa(config.env.kappa);
            let mut learner = Learner::new(lc, env.states().clone(), env.actions().clone()).map_err(learn_err)?;
            for _ in 0..config.episodes {
                let t = clock();
                let out = learner.run_episode(&mut env, &mut rngs, false).map_err(learn_err)?;
                rows.push(row(seed, &out.metrics, t));
            }
            Ok(SeedRun { seed, rows, learner: Some(learner) })
        }
        Algorithm::ActorCriticCentralized | Algorithm::ActorCriticDecentralized | Algorithm::Random => {
            let mut env = TeamGrid::new(spec.clone())?.with_kappa(config.env.kappa);
            let (states, actions) = (env.states().clone(), env.actions().clone());
            let mut ac = match config.algorithm {
                Algorithm::Random => ActorCritic::random(lc, states, actions),
                Algorithm::ActorCriticCentralized => ActorCritic::new(lc, CriticKind::Centralized, states, actions),
                _ => ActorCritic::new(lc, CriticKind::Decentralized, states, actions),
            }
            .map_err(learn_err)?;
            for _ in 0..config.episodes {
                let t = clock();
                let m = ac.run_episode(&mut env, &mut rngs).map_err(learn_err)?;
                rows.push(row(seed, &m, t));
            }
            Ok(SeedRun { seed, rows, learner: None })
        }
        Algorithm::Planner => {
            let (model, terminal) = export_tabular(spec, lc.discount, lc.broadcast_penalty, config.export_limit)?;
            let pool = OptionPool::primitive(model.states().clone(), model.actions().clone());
            let planner = Planner::new(&model, &pool, BroadcastMode::Always)?;
            let solution = planner.solve_state(1e-10, 1_000_000);
            let nj = pool.num_joint();
            let agents = model.num_agents();
            let mut env = ModelEnv::new(model.clone(), spec.max_steps).with_terminal(terminal);
            for episode in 0..config.episodes {
                let t = clock();
                let mut s = env.reset(&mut rngs.env);
                let mut m = teamopt_core::learner::EpisodeMetrics { episode, ..Default::default() };
                for _ in 0..spec.max_steps {
                    let w = math::argmax(&solution.q[s * nj..(s + 1) * nj]);
                    let out = env.step(w, &mut rngs.env);
                    m.total_return += out.reward + lc.broadcast_penalty * agents as f64;
                    m.steps += 1;
                    m.option_switches += 1;
                    s = out.state;
                    if out.done {
                        break;
                    }
                }
                m.broadcast_rate = 1.0;
                rows.push(row(seed, &m, t));
            }
            Ok(SeedRun { seed, rows, learner: None })
        }
    }
}

/// Mean and standard deviation across seeds for one episode window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub window_start: usize,
    pub window_end: usize,
    pub mean_return: f64,
    pub sd_return: f64,
    pub mean_broadcast_rate: f64,
    pub sd_broadcast_rate: f64,
    pub mean_steps: f64,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_aligned(per_seed: &[Vec<MetricsRow>]) -> Result<usize, HarnessError> {
    let n = per_seed.first().map(Vec::len).ok_or_else(|| HarnessError::Mismatch("no metrics files".into()))?;
    for rows in per_seed {
        if rows.len() != n {
            return Err(HarnessError::Mismatch(format!("episode counts {} and {}", n, rows.len())));
        }
        if rows.iter().enumerate().any(|(e, r)| r.episode != e) {
            return Err(HarnessError::Mismatch("episodes must be numbered 0, 1, 2, ...".into()));
        }
    }
    let mut seeds: Vec<u64> = per_seed.iter().map(|r| r.first().map_or(0, |x| x.seed)).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != per_seed.len() {
        return Err(HarnessError::Mismatch("duplicate seeds".into()));
    }
    Ok(n)
}

fn window_mean(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

/// Aggregates per-seed metrics in consecutive windows of `window` episodes.
pub fn aggregate(per_seed: &[Vec<MetricsRow>], window: usize) -> Result<Vec<AggregateRow>, HarnessError> {
    let n = check_aligned(per_seed)?;
    let window = window.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + window).min(n);
        let returns: Vec<f64> = per_seed.iter().map(|r| window_mean(&r[start..end], |x| x.total_return)).collect();
        let rates: Vec<f64> = per_seed.iter().map(|r| window_mean(&r[start..end], |x| x.broadcast_rate)).collect();
        let steps: Vec<f64> = per_seed.iter().map(|r| window_mean(&r[start..end], |x| x.steps as f64)).collect();
        let (mean_return, sd_return) = mean_sd(&returns);
        let (mean_broadcast_rate, sd_broadcast_rate) = mean_sd(&rates);
        out.push(AggregateRow {
            window_start: start,
            window_end: end - 1,
            mean_return,
            sd_return,
            mean_broadcast_rate,
            sd_broadcast_rate,
            mean_steps: mean_sd(&steps).0,
        });
        start = end;
    }
    Ok(out)
}

/// Number of episodes in the final window: the last 10%, at least one.
pub fn final_window_len(episodes: usize) -> usize {
    episodes.div_ceil(10).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_return: f64,
    pub final_broadcast_rate: f64,
    pub final_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: usize,
    pub final_window: usize,
    pub seeds: Vec<SeedSummary>,
    pub mean_final_return: f64,
    pub sd_final_return: f64,
    pub mean_final_broadcast_rate: f64,
    pub sd_final_broadcast_rate: f64,
}

pub fn summarize(per_seed: &[Vec<MetricsRow>]) -> Result<RunSummary, HarnessError> {
    let n = check_aligned(per_seed)?;
    let w = final_window_len(n);
    let seeds: Vec<SeedSummary> = per_seed
        .iter()
        .map(|rows| {
            let tail = &rows[n - w..];
            SeedSummary {
                seed: rows[0].seed,
                final_return: window_mean(tail, |x| x.total_return),
                final_broadcast_rate: window_mean(tail, |x| x.broadcast_rate),
                final_steps: window_mean(tail, |x| x.steps as f64),
            }
        })
        .collect();
    let (mean_final_return, sd_final_return) = mean_sd(&seeds.iter().map(|s| s.final_return).collect::<Vec<_>>());
    let (mean_final_broadcast_rate, sd_final_broadcast_rate) =
        mean_sd(&seeds.iter().map(|s| s.final_broadcast_rate).collect::<Vec<_>>());
    Ok(RunSummary {
        episodes: n,
        final_window: w,
        seeds,
        mean_final_return,
        sd_final_return,
        mean_final_broadcast_rate,
        sd_final_broadcast_rate,
    })
}

pub fn metrics_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("metrics_seed{seed}.csv"))
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(output(path)?);
    for r in rows {
        w.serialize(r).map_err(FormatError::from)?;
    }
    w.flush().map_err(|source| HarnessError::Output { path: path.into(), source })
}

/// Runs every seed of `config` (in parallel) and writes `metrics_seed<k>.csv`,
/// `aggregate.csv`, `summary.json`, `config.json` and, for the DOC learner,
/// `checkpoint_seed<k>.json` under `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let spec = config.validate()?;
    fs::create_dir_all(&config.out).map_err(|source| HarnessError::Output { path: config.out.clone(), source })?;
    let runs: Vec<SeedRun> = config.seeds.par_iter().map(|&seed| run_seed(config, &spec, seed)).collect::<Result<_, _>>()?;
    let mut per_seed = Vec::with_capacity(runs.len());
    for r in runs {
        let path = metrics_path(&config.out, r.seed);
        let mut w = output(&path)?;
        formats::write_metrics(&r.rows, &mut w)?;
        w.flush().map_err(|source| HarnessError::Output { path: path.clone(), source })?;
        if let Some(l) = &r.learner {
            write_json(&config.out.join(format!("checkpoint_seed{}.json", r.seed)), &Checkpoint::from_learner(l))?;
        }
        per_seed.push(r.rows);
    }
    write_aggregate(&config.out.join("aggregate.csv"), &aggregate(&per_seed, config.window())?)?;
    let summary = summarize(&per_seed)?;
    write_json(&config.out.join("summary.json"), &summary)?;
    write_json(&config.out.join("config.json"), config)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    BroadcastPenalty,
    NumOptions,
    NumAgents,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::BroadcastPenalty => "broadcast_penalty",
            Self::NumOptions => "num_options",
            Self::NumAgents => "num_agents",
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<(), HarnessError> {
        let count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(ConfigError::Field { field: self.name().into(), reason: format!("{v} is not a positive integer") })
            }
        };
        match self {
            Self::BroadcastPenalty => config.learner.broadcast_penalty = value,
            Self::NumOptions => config.learner.options_per_agent = count(value)?,
            Self::NumAgents => config.env.agents = Some(count(value)?),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_return: f64,
    pub sd_return: f64,
    pub mean_broadcast_rate: f64,
    pub sd_broadcast_rate: f64,
}

/// Runs `config` once per value of `axis` into `<out>/<axis>=<value>` and
/// writes the final-window comparison table to `<out>/sweep.csv`.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = config.clone();
        axis.apply(&mut c, v)?;
        c.out = config.out.join(format!("{}={}", axis.name(), v));
        c.validate()?;
        points.push((v, c));
    }
    let summaries: Vec<RunSummary> = points.par_iter().map(|(_, c)| run(c)).collect::<Result<_, _>>()?;
    let table: Vec<SweepRow> = points
        .iter()
        .zip(&summaries)
        .map(|((v, _), s)| SweepRow {
            value: *v,
            mean_return: s.mean_final_return,
            sd_return: s.sd_final_return,
            mean_broadcast_rate: s.mean_final_broadcast_rate,
            sd_broadcast_rate: s.sd_final_broadcast_rate,
        })
        .collect();
    let path = config.out.join("sweep.csv");
    let mut w = csv::Writer::from_writer(output(&path)?);
    for r in &table {
        w.serialize(r).map_err(FormatError::from)?;
    }
    w.flush().map_err(|source| HarnessError::Output { path, source })?;
    Ok(table)
}

/// Per-episode smoothed curve: trailing moving average per seed, then mean
/// and one standard deviation band across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub mean_return: f64,
    pub sd_return: f64,
    pub lower: f64,
    pub upper: f64,
    pub mean_broadcast_rate: f64,
}

pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

pub fn plot_curves(per_seed: &[Vec<MetricsRow>], window: usize) -> Result<Vec<CurveRow>, HarnessError> {
    let n = check_aligned(per_seed)?;
    let returns: Vec<Vec<f64>> =
        per_seed.iter().map(|r| moving_average(&r.iter().map(|x| x.total_return).collect::<Vec<_>>(), window)).collect();
    let rates: Vec<Vec<f64>> =
        per_seed.iter().map(|r| moving_average(&r.iter().map(|x| x.broadcast_rate).collect::<Vec<_>>(), window)).collect();
    Ok((0..n)
        .map(|e| {
            let (m, sd) = mean_sd(&returns.iter().map(|r| r[e]).collect::<Vec<_>>());
            CurveRow {
                episode: e,
                mean_return: m,
                sd_return: sd,
                lower: m - sd,
                upper: m + sd,
                mean_broadcast_rate: mean_sd(&rates.iter().map(|r| r[e]).collect::<Vec<_>>()).0,
            }
        })
        .collect())
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let f = File::open(path).map_err(|source| HarnessError::Input { path: path.into(), source })?;
    Ok(formats::read_metrics(f)?)
}

/// Reads per-seed metrics files and writes the smoothed curve to `out`.
pub fn emit_plotdata(files: &[PathBuf], window: usize, out: &Path) -> Result<Vec<CurveRow>, HarnessError> {
    let per_seed: Vec<Vec<MetricsRow>> = files.iter().map(|p| read_metrics_file(p)).collect::<Result<_, _>>()?;
    let curve = plot_curves(&per_seed, window)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    for r in &curve {
        w.serialize(r).map_err(FormatError::from)?;
    }
    w.flush().map_err(|source| HarnessError::Output { path: out.into(), source })?;
    Ok(curve)
}

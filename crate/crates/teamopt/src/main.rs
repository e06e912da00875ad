use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use teamopt::config::{Algorithm, ExperimentConfig, ModeName};
use teamopt::formats::{self, Checkpoint, GridFile, PlannerReport};
use teamopt::harness::{self, SweepAxis};
use teamopt::oracle::{self, CallAndReturn, Coordinator, Prescription};
use teamopt_core::belief::{CommonBelief, Filter};
use teamopt_core::planner::Planner;
use teamopt_core::sample::{self, stream_rng};
use teamopt_core::teamgrid::{self, export_tabular};
use teamopt_core::{math, DecPomdpModel, OptionPool};

#[derive(Parser)]
#[command(name = "teamopt", version, about = "Option planning and learning for cooperative multi-agent teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an exported tabular model with the option planner.
    Plan(PlanArgs),
    /// Train one configuration over one or more seeds.
    Train(TrainArgs),
    /// Train a configuration for each value of one axis.
    Sweep(SweepArgs),
    /// Monte-Carlo evaluation of options on a tabular model.
    Oracle(OracleArgs),
    /// Export a grid layout as a tabular model.
    ExportEnv(ExportArgs),
    /// Check a model file for invalid kernels and rewards.
    Validate(ValidateArgs),
    /// Smooth per-seed metrics files into a curve file.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Seed list, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    broadcast_mode: ModeName,
    /// Base configuration file (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    goals: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    broadcast_penalty: Option<f64>,
    #[arg(long)]
    options: Option<usize>,
    #[arg(long)]
    timing: bool,
    /// Override any field by dotted path, e.g. `learner.alpha_q=0.2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Values, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    values: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BeliefMode {
    ExactBroadcast,
    ReachableCapped,
}

#[derive(Args)]
struct ModelSource {
    /// Model file written by `export-env`.
    #[arg(long, conflicts_with = "env")]
    model: Option<PathBuf>,
    /// Export this layout on the fly.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    goals: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    discount: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    broadcast_penalty: f64,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, value_enum, default_value = "exact-broadcast")]
    belief_mode: BeliefMode,
    #[arg(long, value_enum, default_value = "always")]
    broadcast_mode: ModeName,
    /// Option parameters from a training checkpoint; default is one option per action.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iterations: usize,
    #[arg(long, default_value_t = 50)]
    depth_cap: usize,
    #[arg(long, default_value_t = 20_000)]
    max_beliefs: usize,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OraclePolicy {
    /// A uniformly random joint option every step.
    Random,
    /// Call-and-return with the checkpoint critic's best option under the common belief.
    Greedy,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    policy: OraclePolicy,
    #[arg(long, value_enum, default_value = "always")]
    broadcast_mode: ModeName,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    env: String,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    goals: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    slip_prob: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    discount: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    broadcast_penalty: f64,
    #[arg(long, default_value_t = teamgrid::DEFAULT_EXPORT_LIMIT)]
    limit: usize,
    /// Model output file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the layout itself.
    #[arg(long)]
    grid_out: Option<PathBuf>,
    /// Print the initial state.
    #[arg(long)]
    render: bool,
}

#[derive(Args)]
struct ValidateArgs {
    model: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

fn set_path(value: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("`{path}`: `{key}` is not inside an object"))?;
        if i + 1 == parts.len() {
            let v = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
            obj.insert((*key).into(), v);
            return Ok(());
        }
        cur = obj.entry(*key).or_insert_with(|| serde_json::json!({}));
        if cur.is_null() {
            *cur = serde_json::json!({});
        }
    }
    Ok(())
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    c.seeds = a.seed.clone();
    c.out = a.out.clone();
    c.broadcast_mode = a.broadcast_mode;
    if let Some(v) = a.algorithm {
        c.algorithm = v;
    }
    if let Some(v) = &a.env {
        c.env.name = v.clone();
    }
    if a.agents.is_some() {
        c.env.agents = a.agents;
    }
    if a.goals.is_some() {
        c.env.goals = a.goals;
    }
    if let Some(v) = a.episodes {
        c.episodes = v;
    }
    if let Some(v) = a.broadcast_penalty {
        c.learner.broadcast_penalty = v;
    }
    if let Some(v) = a.options {
        c.learner.options_per_agent = v;
    }
    c.timing |= a.timing;
    if !a.set.is_empty() {
        let mut v = serde_json::to_value(&c)?;
        for s in &a.set {
            let (path, raw) = s.split_once('=').ok_or_else(|| anyhow!("--set expects PATH=VALUE, got `{s}`"))?;
            set_path(&mut v, path, raw)?;
        }
        c = serde_json::from_value(v).context("applying --set overrides")?;
    }
    Ok(c)
}

fn load_model(src: &ModelSource) -> Result<(DecPomdpModel, Option<Vec<bool>>)> {
    match (&src.model, &src.env) {
        (Some(path), _) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let m = formats::read_model(BufReader::new(f))?;
            Ok((m, None))
        }
        (None, Some(name)) => {
            let d = teamgrid::EnvParams::defaults(name);
            let p = teamgrid::EnvParams { agents: src.agents.unwrap_or(d.agents), goals: src.goals.unwrap_or(d.goals), ..d };
            let spec = teamgrid::make_env(name, p)?;
            let (m, t) = export_tabular(&spec, src.discount, src.broadcast_penalty, teamgrid::DEFAULT_EXPORT_LIMIT)?;
            Ok((m, Some(t)))
        }
        (None, None) => bail!("give either --model or --env"),
    }
}

fn load_pool(model: &DecPomdpModel, checkpoint: Option<&Path>) -> Result<(OptionPool, Option<Checkpoint>)> {
    match checkpoint {
        None => Ok((OptionPool::primitive(model.states().clone(), model.actions().clone()), None)),
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let ck: Checkpoint = serde_json::from_str(&text)?;
            let learner = ck.to_learner(Default::default())?;
            if learner.pool.states() != model.states() || learner.pool.actions() != model.actions() {
                bail!("checkpoint does not match the model's states and actions");
            }
            Ok((learner.pool, Some(ck)))
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => Ok(r?),
        },
    }
}

fn plan(a: &PlanArgs) -> Result<()> {
    let (model, _) = load_model(&a.source)?;
    let (pool, _) = load_pool(&model, a.checkpoint.as_deref())?;
    let planner = Planner::new(&model, &pool, a.broadcast_mode.into())?;
    let report = match a.belief_mode {
        BeliefMode::ExactBroadcast => {
            let sol = planner.solve_state(a.tol, a.max_iterations);
            let nj = planner.num_joint();
            let n = planner.num_states();
            let values: Vec<f64> =
                (0..n).map(|s| sol.q[s * nj..(s + 1) * nj].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
            let policy = (0..n).map(|s| math::argmax(&sol.q[s * nj..(s + 1) * nj])).collect();
            let b0 = model.initial();
            let initial_value =
                (0..nj).map(|w| (0..n).map(|s| b0[s] * sol.q[s * nj + w]).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);
            PlannerReport {
                belief_mode: "exact-broadcast".into(),
                beliefs: n,
                closed: true,
                projected: false,
                residuals: sol.residuals,
                values,
                policy,
                initial_value,
            }
        }
        BeliefMode::ReachableCapped => {
            let mut space = planner.enumerate_beliefs(CommonBelief::initial(&model), a.depth_cap, a.max_beliefs)?;
            planner.project_unclosed(&mut space)?;
            let sol = planner.value_iteration(&space, a.tol, a.max_iterations)?;
            PlannerReport {
                belief_mode: "reachable-capped".into(),
                beliefs: space.len(),
                closed: !space.is_projected(),
                projected: space.is_projected(),
                residuals: sol.residuals,
                initial_value: sol.v[0],
                values: sol.v,
                policy: sol.policy,
            }
        }
    };
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)
}

struct BeliefGreedy<'a> {
    filter: Filter<'a>,
    ck: &'a Checkpoint,
    pool: &'a OptionPool,
    belief: CommonBelief,
    model: &'a DecPomdpModel,
}

impl BeliefGreedy<'_> {
    fn best(&self, candidates: &[usize]) -> usize {
        let nj = self.pool.num_joint();
        let na = self.model.num_actions();
        let value = |w: usize| -> f64 {
            self.belief
                .support()
                .map(|(s, p)| {
                    let q: f64 =
                        (0..na).map(|a| self.pool.joint_action_prob(s, w, a) * self.ck.q_intra[(s * nj + w) * na + a]).sum();
                    p * q
                })
                .sum()
        };
        let values: Vec<f64> = candidates.iter().map(|&w| value(w)).collect();
        candidates[math::argmax(&values)]
    }
}

impl Coordinator for BeliefGreedy<'_> {
    fn reset(&mut self) {
        self.belief = CommonBelief::initial(self.model);
    }

    fn prescribe(&mut self, p: &Prescription<'_>) -> usize {
        if let (Some(obs), Some(w)) = (p.common, p.previous) {
            let prior = self.filter.predict(&self.belief, w);
            self.belief = self.filter.posterior(&prior, obs, w).expect("observation has positive likelihood");
        }
        match p.previous {
            Some(w) if p.terminated.iter().all(|&t| !t) => w,
            Some(w) => {
                let joint = self.pool.joint_space();
                let candidates: Vec<usize> = (0..self.pool.num_joint())
                    .filter(|&c| {
                        (0..p.terminated.len()).all(|j| p.terminated[j] || joint.component(c, j) == joint.component(w, j))
                    })
                    .collect();
                self.best(&candidates)
            }
            None => self.best(&(0..self.pool.num_joint()).collect::<Vec<_>>()),
        }
    }
}

fn oracle_cmd(a: &OracleArgs) -> Result<()> {
    let (model, terminal) = load_model(&a.source)?;
    let (pool, ck) = load_pool(&model, a.checkpoint.as_deref())?;
    let mut rng = stream_rng(a.seed, 0);
    let mode = a.broadcast_mode.into();
    let est = match a.policy {
        OraclePolicy::Random => {
            let mut pick = stream_rng(a.seed, 1);
            let nj = pool.num_joint();
            let mut c = CallAndReturn { choose: move |_: &Prescription<'_>| sample::index(&mut pick, nj) };
            oracle::oracle_evaluate(&model, &pool, mode, &mut c, a.episodes, a.horizon, terminal.as_deref(), &mut rng)
        }
        OraclePolicy::Greedy => {
            let ck = ck.ok_or_else(|| anyhow!("--policy greedy needs --checkpoint"))?;
            let mut c = BeliefGreedy {
                filter: Filter::new(&model, &pool, mode)?,
                ck: &ck,
                pool: &pool,
                belief: CommonBelief::initial(&model),
                model: &model,
            };
            oracle::oracle_evaluate(&model, &pool, mode, &mut c, a.episodes, a.horizon, terminal.as_deref(), &mut rng)
        }
    };
    println!("mean {:.6} stderr {:.6} episodes {}", est.mean, est.stderr, est.episodes);
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let d = teamgrid::EnvParams::defaults(&a.env);
    let p = teamgrid::EnvParams {
        agents: a.agents.unwrap_or(d.agents),
        goals: a.goals.unwrap_or(d.goals),
        width: a.width.unwrap_or(d.width),
        height: a.height.unwrap_or(d.height),
        max_steps: a.max_steps.unwrap_or(d.max_steps),
    };
    let mut spec = teamgrid::make_env(&a.env, p)?;
    if let Some(s) = a.slip_prob {
        spec.slip_prob = s;
    }
    let (model, _) = export_tabular(&spec, a.discount, a.broadcast_penalty, a.limit)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    formats::write_model(&model, &mut w)?;
    w.flush()?;
    if let Some(g) = &a.grid_out {
        std::fs::write(g, serde_json::to_string_pretty(&GridFile::from_spec(&spec))?)?;
    }
    print!("{}", teamgrid::describe(&spec));
    println!("{} joint states, {} joint actions", model.num_states(), model.num_actions());
    if a.render {
        print!("{}", teamgrid::render(&spec, &spec.initial_state()));
    }
    Ok(())
}

fn validate(a: &ValidateArgs) -> Result<ExitCode> {
    let f = File::open(&a.model).with_context(|| format!("opening {}", a.model.display()))?;
    let model = formats::read_model(BufReader::new(f))?;
    let violations = model.validate();
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} joint states, {} agents", model.num_states(), model.num_agents());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Plan(a) => plan(&a)?,
        Command::Train(a) => {
            let c = build_config(&a.run)?;
            let s = harness::run(&c)?;
            println!(
                "final-window return {:.4} ± {:.4}, broadcast rate {:.4} over {} seeds",
                s.mean_final_return,
                s.sd_final_return,
                s.mean_final_broadcast_rate,
                s.seeds.len()
            );
        }
        Command::Sweep(a) => {
            let c = build_config(&a.run)?;
            for r in harness::sweep(&c, a.axis, &a.values)? {
                println!(
                    "{}={}: return {:.4} ± {:.4}, broadcast rate {:.4} ± {:.4}",
                    a.axis.name(),
                    r.value,
                    r.mean_return,
                    r.sd_return,
                    r.mean_broadcast_rate,
                    r.sd_broadcast_rate
                );
            }
        }
        Command::Oracle(a) => oracle_cmd(&a)?,
        Command::ExportEnv(a) => export(&a)?,
        Command::Validate(a) => return validate(&a),
        Command::Plotdata(a) => {
            let rows = harness::emit_plotdata(&a.files, a.window, &a.out)?;
            println!("{} episodes written to {}", rows.len(), a.out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

//! Text formats: models, grid layouts, belief dumps, checkpoints, planner
//! reports and metrics files.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use teamopt_core::belief::{BroadcastMode, CommonBelief};
use teamopt_core::learner::{CriticTables, Learner, LearnerConfig};
use teamopt_core::model::{FactoredKernels, ModelParts, ObservationKernel, RewardModel, SparseMatrix};
use teamopt_core::option::{MarkovOption, OptionPool};
use teamopt_core::teamgrid::{Dir, Goal, GridSpec, Room, Spawn, Switch};
use teamopt_core::{DecPomdpModel, ProductSpace, StateSpace};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] teamopt_core::ModelError),
    #[error(transparent)]
    Grid(#[from] teamopt_core::teamgrid::GridError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Shape(String),
}

/// Serialized form of a [`DecPomdpModel`]. Transition entries are
/// `(s, a, s', p)`; observation entries are `(s', o, p)` or, when the
/// kernel depends on the previous action, `(s', a, o, p)` flattened to row
/// `s' · |A| + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub shared_states: usize,
    pub agent_states: Vec<usize>,
    pub agent_actions: Vec<usize>,
    pub agent_observations: Vec<usize>,
    pub discount: f64,
    pub broadcast_penalty: f64,
    pub reward_bound: f64,
    pub transitions: Vec<(usize, usize, usize, f64)>,
    #[serde(default)]
    pub observation_depends_on_action: bool,
    pub observations: Vec<(usize, usize, f64)>,
    pub rewards: RewardFile,
    pub initial: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factored: Option<FactoredFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFile {
    /// One value per transition entry, in the same order.
    Joint(Vec<f64>),
    /// Per agent, indexed `(s·|A^j| + a)·|S^j| + s'`.
    PerAgent(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredFile {
    /// Per agent `(s, a, s', p)`.
    pub transitions: Vec<Vec<(usize, usize, usize, f64)>>,
    /// Per agent `(s, o, p)`.
    pub observations: Vec<Vec<(usize, usize, f64)>>,
}

fn triples(m: &SparseMatrix, width: usize) -> Vec<(usize, usize, usize, f64)> {
    (0..m.rows()).flat_map(|r| m.row(r).iter().map(move |&(c, p)| (r / width, r % width, c, p))).collect()
}

fn pairs(m: &SparseMatrix) -> Vec<(usize, usize, f64)> {
    (0..m.rows()).flat_map(|r| m.row(r).iter().map(move |&(c, p)| (r, c, p))).collect()
}

fn rows_from<I: IntoIterator<Item = (usize, usize, f64)>>(
    n_rows: usize,
    entries: I,
    what: &str,
) -> Result<SparseMatrix, FormatError> {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
    let mut last: Option<usize> = None;
    for (r, c, p) in entries {
        if r >= n_rows {
            return Err(FormatError::Shape(format!("{what}: row {r} out of range ({n_rows} rows)")));
        }
        if last.is_some_and(|l| r < l) {
            return Err(FormatError::Shape(format!("{what}: entries must be sorted by row")));
        }
        last = Some(r);
        rows[r].push((c, p));
    }
    Ok(SparseMatrix::from_rows(rows))
}

impl ModelFile {
    pub fn from_model(model: &DecPomdpModel) -> Self {
        let na = model.num_actions();
        let (depends, observations) = match model.observation_kernel() {
            ObservationKernel::StateOnly(m) => (false, pairs(m)),
            ObservationKernel::ActionDependent(m) => (true, pairs(m)),
        };
        let rewards = match model.reward_model() {
            RewardModel::Joint(v) => RewardFile::Joint(v.clone()),
            RewardModel::PerAgent(t) => RewardFile::PerAgent(t.clone()),
        };
        let factored = model.factored().map(|f| FactoredFile {
            transitions: f.transitions.iter().zip(model.actions().dims()).map(|(m, &a)| triples(m, a)).collect(),
            observations: f.observations.iter().map(pairs).collect(),
        });
        Self {
            shared_states: model.states().shared_size(),
            agent_states: model.states().agent_sizes().to_vec(),
            agent_actions: model.actions().dims().to_vec(),
            agent_observations: model.observations().dims().to_vec(),
            discount: model.discount(),
            broadcast_penalty: model.broadcast_penalty(),
            reward_bound: model.reward_bound(),
            transitions: triples(model.transition_matrix(), na),
            observation_depends_on_action: depends,
            observations,
            rewards,
            initial: model.initial().iter().copied().enumerate().filter(|e| e.1 != 0.0).collect(),
            factored,
        }
    }

    pub fn to_model(&self) -> Result<DecPomdpModel, FormatError> {
        let states = StateSpace::with_shared(self.shared_states, self.agent_states.clone());
        let actions = ProductSpace::new(self.agent_actions.clone());
        let observations = ProductSpace::new(self.agent_observations.clone());
        let (ns, na) = (states.size(), actions.size());
        for &(s, a, _, _) in &self.transitions {
            if s >= ns || a >= na {
                return Err(FormatError::Shape(format!("transition ({s}, {a}) out of range")));
            }
        }
        let transition = rows_from(ns * na, self.transitions.iter().map(|&(s, a, s2, p)| (s * na + a, s2, p)), "transitions")?;
        let obs_rows = if self.observation_depends_on_action { ns * na } else { ns };
        let obs = rows_from(obs_rows, self.observations.iter().copied(), "observations")?;
        let observation = if self.observation_depends_on_action {
            ObservationKernel::ActionDependent(obs)
        } else {
            ObservationKernel::StateOnly(obs)
        };
        let reward = match &self.rewards {
            RewardFile::Joint(v) => RewardModel::Joint(v.clone()),
            RewardFile::PerAgent(t) => RewardModel::PerAgent(t.clone()),
        };
        let mut initial = vec![0.0; ns];
        for &(s, p) in &self.initial {
            *initial.get_mut(s).ok_or_else(|| FormatError::Shape(format!("initial state {s} out of range")))? = p;
        }
        let factored = match &self.factored {
            None => None,
            Some(f) => {
                let mut transitions = Vec::new();
                let mut kernels = Vec::new();
                for (j, entries) in f.transitions.iter().enumerate() {
                    let (n, a) = (
                        *self.agent_states.get(j).ok_or_else(|| FormatError::Shape("too many factored agents".into()))?,
                        self.agent_actions[j],
                    );
                    transitions.push(rows_from(
                        n * a,
                        entries.iter().map(|&(s, b, s2, p)| (s * a + b, s2, p)),
                        "factored transitions",
                    )?);
                }
                for (j, entries) in f.observations.iter().enumerate() {
                    let n = *self.agent_states.get(j).ok_or_else(|| FormatError::Shape("too many factored agents".into()))?;
                    kernels.push(rows_from(n, entries.iter().copied(), "factored observations")?);
                }
                Some(FactoredKernels { transitions, observations: kernels })
            }
        };
        Ok(DecPomdpModel::new(ModelParts {
            states,
            actions,
            observations,
            transition,
            observation,
            reward,
            broadcast_penalty: self.broadcast_penalty,
            discount: self.discount,
            initial,
            reward_bound: self.reward_bound,
            factored,
        })?)
    }
}

pub fn write_model<W: Write>(model: &DecPomdpModel, out: W) -> Result<(), FormatError> {
    serde_json::to_writer_pretty(out, &ModelFile::from_model(model))?;
    Ok(())
}

pub fn read_model<R: Read>(input: R) -> Result<DecPomdpModel, FormatError> {
    let file: ModelFile = serde_json::from_reader(input)?;
    file.to_model()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// One string per row; `#` marks a wall.
    pub walls: Vec<String>,
    pub doors: Vec<(usize, usize)>,
    pub switches: Vec<SwitchFile>,
    pub rooms: Vec<RoomFile>,
    pub goals: Vec<GoalFile>,
    pub spawns: Vec<SpawnFile>,
    pub max_steps: usize,
    pub collision_penalty: f64,
    pub goal_reward: f64,
    pub slip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchFile {
    pub x: usize,
    pub y: usize,
    pub lights: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomFile {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub lit_by: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalFile {
    pub x: usize,
    pub y: usize,
    pub revealed_by: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirFile {
    North,
    East,
    South,
    West,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnFile {
    pub x: usize,
    pub y: usize,
    pub dir: DirFile,
}

impl GridFile {
    pub fn from_spec(g: &GridSpec) -> Self {
        let walls =
            (0..g.height).map(|y| (0..g.width).map(|x| if g.walls[y * g.width + x] { '#' } else { '.' }).collect()).collect();
        Self {
            name: g.name.clone(),
            width: g.width,
            height: g.height,
            walls,
            doors: g.doors.clone(),
            switches: g.switches.iter().map(|s| SwitchFile { x: s.x, y: s.y, lights: s.lights.clone() }).collect(),
            rooms: g.rooms.iter().map(|r| RoomFile { x0: r.x0, y0: r.y0, x1: r.x1, y1: r.y1, lit_by: r.lit_by }).collect(),
            goals: g.goals.iter().map(|o| GoalFile { x: o.x, y: o.y, revealed_by: o.revealed_by }).collect(),
            spawns: g
                .spawns
                .iter()
                .map(|s| SpawnFile {
                    x: s.x,
                    y: s.y,
                    dir: [DirFile::North, DirFile::East, DirFile::South, DirFile::West][s.dir as usize],
                })
                .collect(),
            max_steps: g.max_steps,
            collision_penalty: g.collision_penalty,
            goal_reward: g.goal_reward,
            slip_prob: g.slip_prob,
        }
    }

    pub fn to_spec(&self) -> Result<GridSpec, FormatError> {
        if self.walls.len() != self.height || self.walls.iter().any(|r| r.chars().count() != self.width) {
            return Err(FormatError::Shape(format!("wall map must be {} rows of {} characters", self.height, self.width)));
        }
        let spec = GridSpec {
            name: self.name.clone(),
            width: self.width,
            height: self.height,
            walls: self.walls.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect(),
            doors: self.doors.clone(),
            switches: self.switches.iter().map(|s| Switch { x: s.x, y: s.y, lights: s.lights.clone() }).collect(),
            rooms: self.rooms.iter().map(|r| Room { x0: r.x0, y0: r.y0, x1: r.x1, y1: r.y1, lit_by: r.lit_by }).collect(),
            goals: self.goals.iter().map(|g| Goal { x: g.x, y: g.y, revealed_by: g.revealed_by }).collect(),
            spawns: self.spawns.iter().map(|s| Spawn { x: s.x, y: s.y, dir: Dir::from_index(s.dir as usize) }).collect(),
            max_steps: self.max_steps,
            collision_penalty: self.collision_penalty,
            goal_reward: self.goal_reward,
            slip_prob: self.slip_prob,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One `state-index probability` line per support point.
pub fn belief_dump(b: &CommonBelief) -> String {
    let mut out = String::new();
    for (s, p) in b.support() {
        let _ = writeln!(out, "{s} {p:.16e}");
    }
    out
}

pub fn parse_belief_dump(text: &str, states: usize) -> Result<CommonBelief, FormatError> {
    let mut probs = vec![0.0; states];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| FormatError::Parse { line: i + 1, reason: reason.into() };
        let mut parts = line.split_whitespace();
        let s: usize = parts.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("expected a state index"))?;
        let p: f64 = parts.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("expected a probability"))?;
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        *probs.get_mut(s).ok_or_else(|| bad("state index out of range"))? = p;
    }
    CommonBelief::from_probs(probs, 0).map_err(|e| FormatError::Shape(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionFile {
    pub theta: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initiation: Option<Vec<bool>>,
}

/// Learner tables and option parameters after a number of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub episode: usize,
    pub shared_states: usize,
    pub agent_states: Vec<usize>,
    pub agent_actions: Vec<usize>,
    /// Per agent, per option.
    pub options: Vec<Vec<OptionFile>>,
    pub q_intra: Vec<f64>,
    pub q_broadcast: Vec<f64>,
}

impl Checkpoint {
    pub fn from_learner(l: &Learner) -> Self {
        let states = l.pool.states();
        Self {
            episode: l.episode,
            shared_states: states.shared_size(),
            agent_states: states.agent_sizes().to_vec(),
            agent_actions: l.pool.actions().dims().to_vec(),
            options: (0..l.pool.num_agents())
                .map(|j| {
                    l.pool
                        .agent_options(j)
                        .iter()
                        .map(|o| {
                            let (t, e, p) = o.params();
                            OptionFile {
                                theta: t.to_vec(),
                                epsilon: e.to_vec(),
                                phi: p.to_vec(),
                                initiation: o.initiation().map(<[bool]>::to_vec),
                            }
                        })
                        .collect()
                })
                .collect(),
            q_intra: l.critic.q_intra_table().to_vec(),
            q_broadcast: l.critic.q_broadcast_table().to_vec(),
        }
    }

    /// Rebuilds a learner; the broadcast mode is taken from the checkpoint.
    pub fn to_learner(&self, mut config: LearnerConfig) -> Result<Learner, FormatError> {
        config.broadcast_mode = if self.q_broadcast.is_empty() { BroadcastMode::Always } else { BroadcastMode::Intermittent };
        let states = StateSpace::with_shared(self.shared_states, self.agent_states.clone());
        let actions = ProductSpace::new(self.agent_actions.clone());
        if self.options.len() != states.num_agents() {
            return Err(FormatError::Shape("one option list per agent".into()));
        }
        let mut options = Vec::new();
        for (j, list) in self.options.iter().enumerate() {
            let mut agent = Vec::new();
            for (id, f) in list.iter().enumerate() {
                let mut o = MarkovOption::new(id, states.policy_inputs(j), actions.dim(j));
                {
                    let (t, e, p) = o.params_mut();
                    if t.len() != f.theta.len() || e.len() != f.epsilon.len() || p.len() != f.phi.len() {
                        return Err(FormatError::Shape(format!("option {id} of agent {j} has the wrong shape")));
                    }
                    t.copy_from_slice(&f.theta);
                    e.copy_from_slice(&f.epsilon);
                    p.copy_from_slice(&f.phi);
                }
                if let Some(init) = &f.initiation {
                    o = o.with_initiation(init.clone());
                }
                agent.push(o);
            }
            options.push(agent);
        }
        let pool = OptionPool::new(states, actions, options);
        let mut learner = Learner::with_pool(config, pool).map_err(|e| FormatError::Shape(e.to_string()))?;
        let critic: &mut CriticTables = &mut learner.critic;
        if critic.q_intra_table().len() != self.q_intra.len() || critic.q_broadcast_table().len() != self.q_broadcast.len() {
            return Err(FormatError::Shape("critic tables do not match the pool".into()));
        }
        critic.q_intra_table_mut().copy_from_slice(&self.q_intra);
        critic.q_broadcast_table_mut().copy_from_slice(&self.q_broadcast);
        learner.episode = self.episode;
        Ok(learner)
    }
}

/// Result of a planning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerReport {
    pub belief_mode: String,
    pub beliefs: usize,
    pub closed: bool,
    pub projected: bool,
    pub residuals: Vec<f64>,
    pub values: Vec<f64>,
    /// Chosen joint option per belief (or state).
    pub policy: Vec<usize>,
    pub initial_value: f64,
}

/// One row of a per-seed metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub episode: usize,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub steps: usize,
    pub broadcast_rate: f64,
    pub option_switches: usize,
    pub wall_time_ms: u64,
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use teamopt_core::teamgrid::{export_tabular, make_env, EnvParams, DEFAULT_EXPORT_LIMIT};

    #[test]
    fn belief_dump_round_trip() {
        let b = CommonBelief::from_probs(vec![0.1, 0.0, 0.2, 0.7], 0).unwrap();
        let text = belief_dump(&b);
        assert_eq!(text.lines().count(), 3);
        let back = parse_belief_dump(&text, 4).unwrap();
        assert_eq!(back.probs(), b.probs());
    }

    #[test]
    fn grid_round_trip() {
        let g = make_env("dualswitch", EnvParams::defaults("dualswitch")).unwrap();
        let f = GridFile::from_spec(&g);
        let text = serde_json::to_string(&f).unwrap();
        let back: GridFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_spec().unwrap(), g);
    }

    #[test]
    fn exported_model_round_trip() {
        let g = make_env("switch", EnvParams { agents: 1, ..EnvParams::defaults("switch") }).unwrap();
        let (m, _) = export_tabular(&g, 0.9, -0.1, DEFAULT_EXPORT_LIMIT).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![MetricsRow {
            seed: 3,
            episode: 0,
            total_return: -0.30000000000000004,
            steps: 30,
            broadcast_rate: 0.5,
            option_switches: 2,
            wall_time_ms: 0,
        }];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("seed,episode,return,steps,broadcast_rate,option_switches,wall_time_ms\n"));
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), rows);
    }
}

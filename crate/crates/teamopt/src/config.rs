//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teamopt_core::belief::{BroadcastMode, SilenceMode};
use teamopt_core::learner::{DoiSchedule, Exploration, LearnerConfig};
use teamopt_core::teamgrid::{make_env, EnvParams, GridSpec};
use thiserror::Error;

use crate::formats::GridFile;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Doc,
    ActorCriticCentralized,
    ActorCriticDecentralized,
    Random,
    Planner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Always,
    Intermittent,
}

impl From<ModeName> for BroadcastMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Always => BroadcastMode::Always,
            ModeName::Intermittent => BroadcastMode::Intermittent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// `fourrooms`, `switch` or `dualswitch`; ignored when `grid_file` is set.
    pub name: String,
    pub agents: Option<usize>,
    pub goals: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub max_steps: Option<usize>,
    pub slip_prob: Option<f64>,
    pub collision_penalty: Option<f64>,
    pub goal_reward: Option<f64>,
    /// Stay probability of Forward in the local belief model.
    pub kappa: f64,
    pub grid_file: Option<PathBuf>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: "switch".into(),
            agents: None,
            goals: None,
            width: None,
            height: None,
            max_steps: None,
            slip_prob: None,
            collision_penalty: None,
            goal_reward: None,
            kappa: 0.1,
            grid_file: None,
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<GridSpec, ConfigError> {
        let mut spec = match &self.grid_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                let file: GridFile =
                    serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.clone(), source })?;
                file.to_spec().map_err(|e| field("env.grid_file", e.to_string()))?
            }
            None => {
                let d = EnvParams::defaults(&self.name);
                let p = EnvParams {
                    agents: self.agents.unwrap_or(d.agents),
                    goals: self.goals.unwrap_or(d.goals),
                    width: self.width.unwrap_or(d.width),
                    height: self.height.unwrap_or(d.height),
                    max_steps: self.max_steps.unwrap_or(d.max_steps),
                };
                make_env(&self.name, p).map_err(|e| field("env", e.to_string()))?
            }
        };
        if let Some(v) = self.slip_prob {
            spec.slip_prob = v;
        }
        if let Some(v) = self.collision_penalty {
            spec.collision_penalty = v;
        }
        if let Some(v) = self.goal_reward {
            spec.goal_reward = v;
        }
        spec.validate().map_err(|e| field("env", e.to_string()))?;
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(field("env.kappa", "must lie in (0, 1)"));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationName {
    EpsilonGreedy,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    EveryStep,
    OptionBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SilenceName {
    Informative,
    Uninformative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSettings {
    pub alpha_theta: f64,
    pub alpha_epsilon: f64,
    pub alpha_phi: f64,
    pub alpha_q: f64,
    pub lr_decay: f64,
    pub discount: f64,
    pub broadcast_penalty: f64,
    pub exploration: ExplorationName,
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_decay: f64,
    pub temperature: f64,
    pub entropy: f64,
    pub scale_entropy: bool,
    pub options_per_agent: usize,
    pub silence: SilenceName,
    pub doi_schedule: ScheduleName,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        let c = LearnerConfig::default();
        let (start, end, decay) = match c.exploration {
            Exploration::EpsilonGreedy { start, end, decay } => (start, end, decay),
            Exploration::Softmax { .. } => (0.9, 0.05, 0.999),
        };
        Self {
            alpha_theta: c.alpha_theta,
            alpha_epsilon: c.alpha_epsilon,
            alpha_phi: c.alpha_phi,
            alpha_q: c.alpha_q,
            lr_decay: c.lr_decay,
            discount: c.discount,
            broadcast_penalty: c.broadcast_penalty,
            exploration: ExplorationName::EpsilonGreedy,
            explore_start: start,
            explore_end: end,
            explore_decay: decay,
            temperature: 1.0,
            entropy: c.entropy,
            scale_entropy: c.scale_entropy,
            options_per_agent: c.options_per_agent,
            silence: SilenceName::Informative,
            doi_schedule: ScheduleName::EveryStep,
        }
    }
}

impl LearnerSettings {
    pub fn to_config(&self, mode: ModeName) -> LearnerConfig {
        LearnerConfig {
            alpha_theta: self.alpha_theta,
            alpha_epsilon: self.alpha_epsilon,
            alpha_phi: self.alpha_phi,
            alpha_q: self.alpha_q,
            lr_decay: self.lr_decay,
            discount: self.discount,
            broadcast_penalty: self.broadcast_penalty,
            exploration: match self.exploration {
                ExplorationName::EpsilonGreedy => {
                    Exploration::EpsilonGreedy { start: self.explore_start, end: self.explore_end, decay: self.explore_decay }
                }
                ExplorationName::Softmax => Exploration::Softmax { temperature: self.temperature },
            },
            entropy: self.entropy,
            scale_entropy: self.scale_entropy,
            options_per_agent: self.options_per_agent,
            broadcast_mode: mode.into(),
            silence: match self.silence {
                SilenceName::Informative => SilenceMode::Informative,
                SilenceName::Uninformative => SilenceMode::Uninformative,
            },
            doi_schedule: match self.doi_schedule {
                ScheduleName::EveryStep => DoiSchedule::EveryStep,
                ScheduleName::OptionBoundary => DoiSchedule::OptionBoundary,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    pub learner: LearnerSettings,
    pub broadcast_mode: ModeName,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub out: PathBuf,
    /// Episodes per aggregate row; 0 picks `episodes / 50`.
    pub aggregate_window: usize,
    /// Record wall-clock time per episode (makes metrics files non-reproducible).
    pub timing: bool,
    /// Largest joint state space the planner algorithm will export.
    pub export_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            algorithm: Algorithm::Doc,
            learner: LearnerSettings::default(),
            broadcast_mode: ModeName::Always,
            seeds: vec![0],
            episodes: 1000,
            out: PathBuf::from("runs"),
            aggregate_window: 0,
            timing: false,
            export_limit: teamopt_core::teamgrid::DEFAULT_EXPORT_LIMIT,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    pub fn learner_config(&self) -> LearnerConfig {
        self.learner.to_config(self.broadcast_mode)
    }

    pub fn window(&self) -> usize {
        if self.aggregate_window == 0 {
            (self.episodes / 50).max(1)
        } else {
            self.aggregate_window
        }
    }

    /// Checks every field and names the first offending one.
    pub fn validate(&self) -> Result<GridSpec, ConfigError> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(field("seeds", "seeds must be distinct"));
        }
        if self.episodes == 0 {
            return Err(field("episodes", "must be >= 1"));
        }
        self.learner_config().validate().map_err(|e| match e {
            teamopt_core::learner::LearnerError::Config { field: f, value, reason } => {
                field_value(&format!("learner.{f}"), value, reason)
            }
            other => field("learner", other.to_string()),
        })?;
        if self.algorithm == Algorithm::Planner && self.broadcast_mode != ModeName::Always {
            return Err(field("broadcast_mode", "the planner algorithm runs with always-broadcast"));
        }
        self.env.build()
    }
}

fn field_value(name: &str, value: f64, reason: &str) -> ConfigError {
    field(name, format!("{value} is invalid ({reason})"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().unwrap_err().to_string().contains("`seeds`"));
        let mut c = ExperimentConfig::default();
        c.learner.alpha_q = 2.0;
        assert!(c.validate().unwrap_err().to_string().contains("`learner.alpha_q`"));
        let mut c = ExperimentConfig::default();
        c.env.name = "maze".into();
        assert!(c.validate().unwrap_err().to_string().contains("`env`"));
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"episodes": 7, "learner": {"alpha_q": 0.5}}"#).unwrap();
        assert_eq!(c.episodes, 7);
        assert_eq!(c.learner.alpha_q, 0.5);
        assert_eq!(c.learner.alpha_theta, LearnerSettings::default().alpha_theta);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"episodez": 7}"#).is_err());
    }
}

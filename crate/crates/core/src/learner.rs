//! Distributed option-critic learning.
//!
//! A centralized critic is trained on joint states sampled from the common
//! belief, and each agent improves its own options with policy-gradient
//! updates evaluated on the critic with its own component replaced by its
//! private state. Tabular actor-critic and random baselines share the same
//! episode metrics.
//!
//! Random draws use three streams: environment dynamics, agent decisions
//! (option choice, actions, broadcasts, terminations) and belief sampling.
//! Within a step the agent stream is consumed in this order: actions of
//! every agent, broadcast bits (intermittent mode only), termination draws,
//! then reselection.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::belief::{
    BeliefError, BroadcastMode, CommonBelief, CommonObservation, Filter, LocalBelief, LocalDynamics, SilenceMode,
};
use crate::math;
use crate::model::DecPomdpModel;
use crate::option::OptionPool;
use crate::planner;
use crate::sample::{self, stream_rng, SimRng};
use crate::space::{ProductSpace, StateSpace};

pub const ENV_STREAM: u64 = 0;
pub const AGENT_STREAM: u64 = 1;
pub const BELIEF_STREAM: u64 = 2;

/// Generators of one run.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub env: SimRng,
    pub agent: SimRng,
    pub belief: SimRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self { env: stream_rng(seed, ENV_STREAM), agent: stream_rng(seed, AGENT_STREAM), belief: stream_rng(seed, BELIEF_STREAM) }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub state: usize,
    /// Per-agent observation components; these are what a broadcast reveals.
    pub observation: Vec<usize>,
    /// Environment reward, without the broadcast penalty.
    pub reward: f64,
    pub done: bool,
}

/// How the common belief is tracked for an environment.
pub enum Tracking<'a> {
    /// Exact filter on a tabular model.
    Exact(&'a DecPomdpModel),
    /// Per-agent marginals with an observed shared component.
    Local(&'a dyn LocalDynamics),
}

pub trait Environment {
    fn states(&self) -> &StateSpace;
    fn actions(&self) -> &ProductSpace;
    fn max_steps(&self) -> usize;
    /// Starts an episode and returns the joint state.
    fn reset(&mut self, rng: &mut SimRng) -> usize;
    fn step(&mut self, action: usize, rng: &mut SimRng) -> Outcome;
    fn tracking(&self) -> Tracking<'_>;
}

/// Episodic environment over a tabular model.
#[derive(Debug, Clone)]
pub struct ModelEnv {
    model: DecPomdpModel,
    horizon: usize,
    terminal: Vec<bool>,
    state: usize,
}

impl ModelEnv {
    pub fn new(model: DecPomdpModel, horizon: usize) -> Self {
        let n = model.num_states();
        Self { model, horizon, terminal: vec![false; n], state: 0 }
    }

    /// Episodes end on entering any state flagged here.
    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Self {
        assert_eq!(terminal.len(), self.model.num_states());
        self.terminal = terminal;
        self
    }

    pub fn model(&self) -> &DecPomdpModel {
        &self.model
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for ModelEnv {
    fn states(&self) -> &StateSpace {
        self.model.states()
    }

    fn actions(&self) -> &ProductSpace {
        self.model.actions()
    }

    fn max_steps(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut SimRng) -> usize {
        self.state = self.model.sample_initial(rng);
        self.state
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Outcome {
        let s = self.state;
        let next = self.model.sample_transition(s, action, rng);
        let o = self.model.sample_observation(next, action, rng);
        self.state = next;
        Outcome {
            state: next,
            observation: self.model.observations().decode(o),
            reward: self.model.reward(s, action, next),
            done: self.terminal[next],
        }
    }

    fn tracking(&self) -> Tracking<'_> {
        Tracking::Exact(&self.model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exploration {
    /// ε-greedy with `ε_e = max(end, start · decay^e)` in episode `e`.
    EpsilonGreedy { start: f64, end: f64, decay: f64 },
    /// Softmax over option values.
    Softmax { temperature: f64 },
}

/// When agents apply their improvement step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoiSchedule {
    EveryStep,
    /// Only on steps where the agent's own option terminates or the episode ends.
    OptionBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub alpha_theta: f64,
    pub alpha_epsilon: f64,
    pub alpha_phi: f64,
    pub alpha_q: f64,
    /// Rates in episode `e` are scaled by `1 / (1 + lr_decay · e)`.
    pub lr_decay: f64,
    pub discount: f64,
    pub broadcast_penalty: f64,
    pub exploration: Exploration,
    pub entropy: f64,
    /// Multiply the entropy coefficient by the agent's pool size.
    pub scale_entropy: bool,
    pub options_per_agent: usize,
    pub broadcast_mode: BroadcastMode,
    pub silence: SilenceMode,
    pub doi_schedule: DoiSchedule,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            alpha_theta: 0.1,
            alpha_epsilon: 0.1,
            alpha_phi: 0.1,
            alpha_q: 0.1,
            lr_decay: 0.0,
            discount: 0.95,
            broadcast_penalty: 0.0,
            exploration: Exploration::EpsilonGreedy { start: 0.9, end: 0.05, decay: 0.999 },
            entropy: 0.01,
            scale_entropy: true,
            options_per_agent: 2,
            broadcast_mode: BroadcastMode::Always,
            silence: SilenceMode::Informative,
            doi_schedule: DoiSchedule::EveryStep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("invalid config: {field} = {value} ({reason})")]
    Config { field: &'static str, value: f64, reason: &'static str },
    #[error(
        "non-finite value in {table} after episode {episode}; lower the learning rates \
         (alpha_q <= 1, policy rates around 0.01 to 0.1) or increase lr_decay"
    )]
    NonFinite { table: &'static str, episode: usize },
    #[error("environment and option pool disagree on states or actions")]
    Mismatch,
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let rate = |field: &'static str, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(LearnerError::Config { field, value, reason: "learning rates lie in [0, 1]" })
            }
        };
        rate("alpha_theta", self.alpha_theta)?;
        rate("alpha_epsilon", self.alpha_epsilon)?;
        rate("alpha_phi", self.alpha_phi)?;
        rate("alpha_q", self.alpha_q)?;
        if !(self.lr_decay >= 0.0) {
            return Err(LearnerError::Config { field: "lr_decay", value: self.lr_decay, reason: "must be >= 0" });
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(LearnerError::Config { field: "discount", value: self.discount, reason: "must lie in (0, 1)" });
        }
        if !(self.broadcast_penalty <= 0.0) {
            return Err(LearnerError::Config {
                field: "broadcast_penalty",
                value: self.broadcast_penalty,
                reason: "must be <= 0",
            });
        }
        if !(self.entropy >= 0.0) {
            return Err(LearnerError::Config { field: "entropy", value: self.entropy, reason: "must be >= 0" });
        }
        if self.options_per_agent == 0 {
            return Err(LearnerError::Config { field: "options_per_agent", value: 0.0, reason: "must be >= 1" });
        }
        match self.exploration {
            Exploration::EpsilonGreedy { start, end, decay } => {
                for (field, v) in [("explore_start", start), ("explore_end", end), ("explore_decay", decay)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(LearnerError::Config { field, value: v, reason: "must lie in [0, 1]" });
                    }
                }
            }
            Exploration::Softmax { temperature } => {
                if !(temperature > 0.0) {
                    return Err(LearnerError::Config { field: "temperature", value: temperature, reason: "must be > 0" });
                }
            }
        }
        Ok(())
    }

    pub fn rate_scale(&self, episode: usize) -> f64 {
        1.0 / (1.0 + self.lr_decay * episode as f64)
    }

    pub fn explore_epsilon(&self, episode: usize) -> f64 {
        match self.exploration {
            Exploration::EpsilonGreedy { start, end, decay } => {
                let mut e = start;
                for _ in 0..episode {
                    e *= decay;
                    if e <= end {
                        return end;
                    }
                }
                e.max(end)
            }
            Exploration::Softmax { .. } => 0.0,
        }
    }

    pub fn entropy_coefficient(&self, pool_size: usize) -> f64 {
        if self.scale_entropy {
            self.entropy * pool_size as f64
        } else {
            self.entropy
        }
    }
}

/// Centralized critic: `Q_intra(s, ω, a)` and, when broadcasting is
/// learned, a broadcast-conditioned `Q_intra(s, ω, a, br)` trained on the
/// same targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTables {
    n_states: usize,
    n_joint: usize,
    n_actions: usize,
    n_broadcast: usize,
    q_intra: Vec<f64>,
    q_broadcast: Vec<f64>,
}

impl CriticTables {
    pub fn new(n_states: usize, n_joint: usize, n_actions: usize, agents: usize, mode: BroadcastMode) -> Self {
        let n_broadcast = match mode {
            BroadcastMode::Always => 0,
            BroadcastMode::Intermittent => 1usize << agents,
        };
        Self {
            n_states,
            n_joint,
            n_actions,
            n_broadcast,
            q_intra: vec![0.0; n_states * n_joint * n_actions],
            q_broadcast: vec![0.0; n_states * n_joint * n_actions * n_broadcast],
        }
    }

    pub fn for_pool(pool: &OptionPool, mode: BroadcastMode) -> Self {
        Self::new(pool.states().size(), pool.num_joint(), pool.actions().size(), pool.num_agents(), mode)
    }

    pub fn num_joint(&self) -> usize {
        self.n_joint
    }

    fn idx(&self, s: usize, omega: usize, a: usize) -> usize {
        (s * self.n_joint + omega) * self.n_actions + a
    }

    pub fn q_intra(&self, s: usize, omega: usize, a: usize) -> f64 {
        self.q_intra[self.idx(s, omega, a)]
    }

    pub fn q_intra_mut(&mut self, s: usize, omega: usize, a: usize) -> &mut f64 {
        let i = self.idx(s, omega, a);
        &mut self.q_intra[i]
    }

    pub fn q_intra_table(&self) -> &[f64] {
        &self.q_intra
    }

    pub fn q_intra_table_mut(&mut self) -> &mut [f64] {
        &mut self.q_intra
    }

    pub fn q_broadcast_table(&self) -> &[f64] {
        &self.q_broadcast
    }

    pub fn q_broadcast_table_mut(&mut self) -> &mut [f64] {
        &mut self.q_broadcast
    }

    pub fn has_broadcast_critic(&self) -> bool {
        self.n_broadcast > 0
    }

    /// `Q_intra(s, ω, a, br)`; `br` is a bit mask over agents.
    pub fn q_broadcast(&self, s: usize, omega: usize, a: usize, br: usize) -> f64 {
        self.q_broadcast[self.idx(s, omega, a) * self.n_broadcast + br]
    }

    /// `Q(s, ω) = Σ_a π^ω(a|s) Q_intra(s, ω, a)`.
    pub fn q(&self, pool: &OptionPool, s: usize, omega: usize) -> f64 {
        let mut probs = Vec::new();
        pool.joint_action_probs(s, omega, &mut probs);
        probs.iter().map(|&(a, p)| p * self.q_intra(s, omega, a)).sum()
    }

    /// `Q(s, ·)` over all joint options.
    pub fn q_row(&self, pool: &OptionPool, s: usize) -> Vec<f64> {
        (0..self.n_joint).map(|w| self.q(pool, s, w)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.q_intra.iter().chain(&self.q_broadcast).all(|v| v.is_finite())
    }
}

/// Bit mask of broadcasting agents.
pub fn broadcast_mask(br: &[bool]) -> usize {
    br.iter().enumerate().filter(|e| *e.1).map(|(j, _)| 1usize << j).sum()
}

/// One critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeStep {
    pub state: usize,
    pub omega: usize,
    pub action: usize,
    /// Mask of broadcasting agents, used by the broadcast critic.
    pub broadcast: usize,
    pub reward: f64,
    /// Successor for bootstrapping; `None` on a terminal step.
    pub next: Option<usize>,
}

/// `δ = r + γ U(s', ω) − Q_intra(s, ω, a)`, then `Q_intra += α δ`.
/// Returns `δ`.
pub fn coe_update(critic: &mut CriticTables, pool: &OptionPool, step: &CoeStep, gamma: f64, alpha: f64) -> f64 {
    let target = match step.next {
        Some(s2) => step.reward + gamma * planner::u_value(pool, s2, step.omega, &critic.q_row(pool, s2)),
        None => step.reward,
    };
    let i = critic.idx(step.state, step.omega, step.action);
    let delta = target - critic.q_intra[i];
    critic.q_intra[i] += alpha * delta;
    if critic.n_broadcast > 0 {
        let k = i * critic.n_broadcast + step.broadcast;
        critic.q_broadcast[k] += alpha * (target - critic.q_broadcast[k]);
    }
    delta
}

/// Joint state `s_sampled` with agent `j`'s local component replaced by
/// `private_local`.
pub fn modified_state(states: &StateSpace, s_sampled: usize, j: usize, private_local: usize) -> usize {
    states.replace_local(s_sampled, j, private_local)
}

/// `Q(s_mod, ω)` at the modified joint state.
pub fn modified_critic_value(
    critic: &CriticTables,
    pool: &OptionPool,
    s_sampled: usize,
    j: usize,
    private_local: usize,
    omega: usize,
) -> f64 {
    critic.q(pool, modified_state(pool.states(), s_sampled, j, private_local), omega)
}

/// Inputs of one improvement step for one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoiStep<'a> {
    /// Belief-sampled joint state at the decision.
    pub sampled: usize,
    /// True joint state at the decision.
    pub state: usize,
    pub omega: usize,
    pub action: usize,
    pub broadcast: &'a [bool],
    /// `(sampled, true)` successors, absent on a terminal step.
    pub next: Option<(usize, usize)>,
}

/// Learning rates of one improvement step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoiRates {
    pub theta: f64,
    pub epsilon: f64,
    pub phi: f64,
    pub entropy: f64,
    pub learn_broadcast: bool,
}

/// Termination advantage `Q(s', ω) − max_{o} Q(s', ω with agent j on o)`.
pub fn termination_advantage(critic: &CriticTables, pool: &OptionPool, s: usize, omega: usize, j: usize) -> f64 {
    let mut mask = vec![false; pool.num_agents()];
    mask[j] = true;
    let current = critic.q(pool, s, omega);
    let best = pool.reselections(s, omega, &mask).into_iter().map(|w| critic.q(pool, s, w)).fold(f64::NEG_INFINITY, f64::max);
    current - best
}

/// Updates agent `j`'s active option and returns the largest absolute
/// parameter change.
pub fn doi_update(pool: &mut OptionPool, critic: &CriticTables, j: usize, step: &DoiStep<'_>, rates: &DoiRates) -> f64 {
    let states = pool.states().clone();
    let id = pool.component(step.omega, j);
    let input = states.policy_input(step.state, j);
    let key = modified_state(&states, step.sampled, j, states.local(step.state, j));
    let q_intra = critic.q_intra(key, step.omega, step.action);
    let a_j = pool.actions().component(step.action, j);
    let advantage = step.next.map(|(s_hat, s_true)| {
        let key_next = modified_state(&states, s_hat, j, states.local(s_true, j));
        (states.policy_input(s_true, j), termination_advantage(critic, pool, key_next, step.omega, j))
    });
    let q_br = if rates.learn_broadcast && critic.has_broadcast_critic() {
        Some(critic.q_broadcast(key, step.omega, step.action, broadcast_mask(step.broadcast)))
    } else {
        None
    };

    let option = pool.option_mut(j, id);
    let n_actions = option.actions();
    let mut score = vec![0.0; n_actions];
    let mut entropy = vec![0.0; n_actions];
    option.action_score_into(input, a_j, &mut score);
    option.action_entropy_grad_into(input, &mut entropy);
    let mut biggest: f64 = 0.0;
    for (t, (g, h)) in option.theta_mut(input).iter_mut().zip(score.iter().zip(&entropy)) {
        let d = rates.theta * (g * q_intra + rates.entropy * h);
        *t += d;
        biggest = biggest.max(d.abs());
    }
    if let (Some(q_br), Some((input_next, _))) = (q_br, advantage) {
        let g = option.broadcast_score(input_next, step.broadcast[j]);
        let h = option.broadcast_entropy_grad(input_next);
        let d = rates.epsilon * (g * q_br + rates.entropy * h);
        *option.epsilon_mut(input_next) += d;
        biggest = biggest.max(d.abs());
    }
    if let Some((input_next, adv)) = advantage {
        let d = rates.phi * option.termination_grad(input_next) * adv;
        *option.phi_mut(input_next) += d;
        biggest = biggest.max(d.abs());
    }
    biggest
}

/// Chooses a joint option at `s`: ε-greedy or softmax over `Q(s, ·)`
/// restricted to initiable options; greedy ties go to the smallest index.
pub fn choose_joint_option(
    critic: &CriticTables,
    pool: &OptionPool,
    s: usize,
    exploration: Exploration,
    epsilon: f64,
    rng: &mut SimRng,
) -> usize {
    let candidates = pool.initiable(s);
    pick(critic, pool, s, &candidates, exploration, epsilon, rng)
}

fn pick(
    critic: &CriticTables,
    pool: &OptionPool,
    s: usize,
    candidates: &[usize],
    exploration: Exploration,
    epsilon: f64,
    rng: &mut SimRng,
) -> usize {
    let values: Vec<f64> = candidates.iter().map(|&w| critic.q(pool, s, w)).collect();
    match exploration {
        Exploration::EpsilonGreedy { .. } => {
            if sample::uniform(rng) < epsilon {
                candidates[sample::index(rng, candidates.len())]
            } else {
                candidates[math::argmax(&values)]
            }
        }
        Exploration::Softmax { temperature } => {
            let mut probs = vec![0.0; values.len()];
            math::softmax_into(&values, temperature, &mut probs);
            candidates[sample::categorical(rng, &probs)]
        }
    }
}

/// For the agents in `terminated`, the components maximizing `Q(s, ·)` with
/// the other agents frozen; ties go to the lexicographically smallest ids.
pub fn greedy_reselect(critic: &CriticTables, pool: &OptionPool, s: usize, omega: usize, terminated: &[bool]) -> usize {
    let candidates = pool.reselections(s, omega, terminated);
    let values: Vec<f64> = candidates.iter().map(|&w| critic.q(pool, s, w)).collect();
    candidates[math::argmax(&values)]
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub k: usize,
    pub state: usize,
    /// Joint state sampled from the common belief for the critic.
    pub sampled: usize,
    pub omega: usize,
    pub action: usize,
    /// Broadcast decisions made on arrival at `next_state`.
    pub broadcast: Vec<bool>,
    pub observation: Vec<usize>,
    pub common: CommonObservation,
    pub reward: f64,
    pub next_state: usize,
    pub terminations: Vec<bool>,
    pub done: bool,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub total_return: f64,
    pub steps: usize,
    pub broadcast_rate: f64,
    pub option_switches: usize,
    pub truncated: bool,
    /// Largest absolute change of any critic entry or option parameter.
    pub max_update: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutput {
    pub metrics: EpisodeMetrics,
    pub records: Vec<TransitionRecord>,
}

enum Tracker {
    Exact(CommonBelief),
    Local(LocalBelief),
}

impl Tracker {
    fn start(env: &dyn Environment, state: usize) -> Self {
        match env.tracking() {
            Tracking::Exact(model) => Tracker::Exact(CommonBelief::initial(model)),
            Tracking::Local(dynamics) => {
                let states = env.states();
                Tracker::Local(LocalBelief::initial(dynamics, states.num_agents(), states.shared_of(state)))
            }
        }
    }

    fn sample(&self, pool: &OptionPool, rng: &mut SimRng) -> usize {
        match self {
            Tracker::Exact(b) => b.sample(rng),
            Tracker::Local(b) => b.sample(pool, rng),
        }
    }

    /// Predicts under `omega` and conditions on the arrival broadcast.
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        env: &dyn Environment,
        pool: &OptionPool,
        mode: BroadcastMode,
        silence: SilenceMode,
        omega: usize,
        next_state: usize,
        obs: &CommonObservation,
    ) -> Result<(), LearnerError> {
        match (self, env.tracking()) {
            (Tracker::Exact(b), Tracking::Exact(model)) => {
                let filter = Filter::new(model, pool, mode)?.with_silence(silence);
                let prior = filter.predict(b, omega);
                *b = filter.posterior(&prior, obs, omega)?;
            }
            (Tracker::Local(b), Tracking::Local(dynamics)) => {
                let shared = env.states().shared_of(next_state);
                b.advance(dynamics, pool, mode, silence, omega, shared, obs)?;
            }
            _ => unreachable!("tracking kind is fixed per environment"),
        }
        Ok(())
    }
}

/// Distributed option-critic learner state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub config: LearnerConfig,
    pub pool: OptionPool,
    pub critic: CriticTables,
    pub episode: usize,
}

impl Learner {
    pub fn new(config: LearnerConfig, states: StateSpace, actions: ProductSpace) -> Result<Self, LearnerError> {
        config.validate()?;
        let pool = OptionPool::uniform(states, actions, config.options_per_agent);
        let critic = CriticTables::for_pool(&pool, config.broadcast_mode);
        Ok(Self { config, pool, critic, episode: 0 })
    }

    pub fn with_pool(config: LearnerConfig, pool: OptionPool) -> Result<Self, LearnerError> {
        config.validate()?;
        let critic = CriticTables::for_pool(&pool, config.broadcast_mode);
        Ok(Self { config, pool, critic, episode: 0 })
    }

    fn rates(&self, j: usize) -> DoiRates {
        let scale = self.config.rate_scale(self.episode);
        DoiRates {
            theta: self.config.alpha_theta * scale,
            epsilon: self.config.alpha_epsilon * scale,
            phi: self.config.alpha_phi * scale,
            entropy: self.config.entropy_coefficient(self.pool.pool_size(j)),
            learn_broadcast: self.config.broadcast_mode == BroadcastMode::Intermittent,
        }
    }

    fn sample_actions(&self, s: usize, omega: usize, rng: &mut SimRng) -> usize {
        let states = self.pool.states();
        let mut parts = vec![0; self.pool.num_agents()];
        let mut probs = Vec::new();
        for (j, part) in parts.iter_mut().enumerate() {
            let o = self.pool.agent_option(omega, j);
            probs.resize(o.actions(), 0.0);
            o.action_probs_into(states.policy_input(s, j), &mut probs);
            *part = sample::categorical(rng, &probs);
        }
        self.pool.actions().encode(&parts)
    }

    /// Runs one episode, learning online; `record` keeps per-step logs.
    pub fn run_episode(
        &mut self,
        env: &mut dyn Environment,
        rngs: &mut RunRngs,
        record: bool,
    ) -> Result<EpisodeOutput, LearnerError> {
        if env.states() != self.pool.states() || env.actions() != self.pool.actions() {
            return Err(LearnerError::Mismatch);
        }
        let agents = self.pool.num_agents();
        let mode = self.config.broadcast_mode;
        let gamma = self.config.discount;
        let explore = self.config.explore_epsilon(self.episode);
        let alpha_q = self.config.alpha_q * self.config.rate_scale(self.episode);
        let cap = env.max_steps();

        let mut s = env.reset(&mut rngs.env);
        let mut tracker = Tracker::start(env, s);
        let mut s_hat = tracker.sample(&self.pool, &mut rngs.belief);
        let mut omega = choose_joint_option(&self.critic, &self.pool, s_hat, self.config.exploration, explore, &mut rngs.agent);

        let mut metrics = EpisodeMetrics { episode: self.episode, ..EpisodeMetrics::default() };
        let mut broadcasts = 0usize;
        let mut records = Vec::new();
        let mut broadcast = vec![true; agents];
        let mut terminations = vec![false; agents];
        for k in 0..cap {
            let a = self.sample_actions(s, omega, &mut rngs.agent);
            let out = env.step(a, &mut rngs.env);
            let s_next = out.state;
            if mode == BroadcastMode::Intermittent {
                for (j, b) in broadcast.iter_mut().enumerate() {
                    *b = sample::bernoulli(&mut rngs.agent, self.pool.broadcast_prob(s_next, omega, j));
                }
            }
            let talkers = broadcast.iter().filter(|&&b| b).count();
            broadcasts += talkers;
            let reward = out.reward + self.config.broadcast_penalty * talkers as f64;
            let common = CommonObservation::assemble(&out.observation, &broadcast);
            tracker.advance(env, &self.pool, mode, self.config.silence, omega, s_next, &common)?;
            let s_hat_next = tracker.sample(&self.pool, &mut rngs.belief);

            let truncated = !out.done && k + 1 == cap;
            let before = self.critic.q_intra(s_hat, omega, a);
            let delta = coe_update(
                &mut self.critic,
                &self.pool,
                &CoeStep {
                    state: s_hat,
                    omega,
                    action: a,
                    broadcast: broadcast_mask(&broadcast),
                    reward,
                    next: if out.done { None } else { Some(s_hat_next) },
                },
                gamma,
                alpha_q,
            );
            let mut biggest = (self.critic.q_intra(s_hat, omega, a) - before).abs();

            let ended = out.done || truncated;
            if !out.done {
                for (j, t) in terminations.iter_mut().enumerate() {
                    *t = sample::bernoulli(&mut rngs.agent, self.pool.termination(s_next, omega, j));
                }
            } else {
                terminations.fill(false);
            }
            for j in 0..agents {
                let due = match self.config.doi_schedule {
                    DoiSchedule::EveryStep => true,
                    DoiSchedule::OptionBoundary => terminations[j] || ended,
                };
                if !due {
                    continue;
                }
                let rates = self.rates(j);
                let step = DoiStep {
                    sampled: s_hat,
                    state: s,
                    omega,
                    action: a,
                    broadcast: &broadcast,
                    next: if out.done { None } else { Some((s_hat_next, s_next)) },
                };
                biggest = biggest.max(doi_update(&mut self.pool, &self.critic, j, &step, &rates));
            }

            if record {
                records.push(TransitionRecord {
                    k,
                    state: s,
                    sampled: s_hat,
                    omega,
                    action: a,
                    broadcast: broadcast.clone(),
                    observation: out.observation.clone(),
                    common,
                    reward,
                    next_state: s_next,
                    terminations: terminations.clone(),
                    done: out.done,
                    delta,
                });
            }
            metrics.total_return += reward;
            metrics.steps += 1;
            metrics.max_update = metrics.max_update.max(biggest);
            if terminations.iter().any(|&t| t) {
                metrics.option_switches += 1;
                omega = if matches!(self.config.exploration, Exploration::EpsilonGreedy { .. }) {
                    if sample::uniform(&mut rngs.agent) < explore {
                        let mut w = omega;
                        for (j, &t) in terminations.iter().enumerate() {
                            if t {
                                let id = sample::index(&mut rngs.agent, self.pool.pool_size(j));
                                w = self.pool.joint_space().replace(w, j, id);
                            }
                        }
                        w
                    } else {
                        greedy_reselect(&self.critic, &self.pool, s_hat_next, omega, &terminations)
                    }
                } else {
                    let candidates = self.pool.reselections(s_hat_next, omega, &terminations);
                    pick(&self.critic, &self.pool, s_hat_next, &candidates, self.config.exploration, 0.0, &mut rngs.agent)
                };
            }
            s = s_next;
            s_hat = s_hat_next;
            metrics.truncated = truncated;
            if out.done {
                break;
            }
        }
        metrics.broadcast_rate = if metrics.steps == 0 { 0.0 } else { broadcasts as f64 / (agents * metrics.steps) as f64 };
        self.check_finite()?;
        self.episode += 1;
        Ok(EpisodeOutput { metrics, records })
    }

    fn check_finite(&self) -> Result<(), LearnerError> {
        if !self.critic.is_finite() {
            return Err(LearnerError::NonFinite { table: "critic", episode: self.episode });
        }
        for j in 0..self.pool.num_agents() {
            for o in self.pool.agent_options(j) {
                let (t, e, p) = o.params();
                if !t.iter().chain(e).chain(p).all(|v| v.is_finite()) {
                    return Err(LearnerError::NonFinite { table: "option parameters", episode: self.episode });
                }
            }
        }
        Ok(())
    }
}

/// Trains a fresh learner for `episodes` episodes with seed `seed`.
pub fn train(
    env: &mut dyn Environment,
    config: LearnerConfig,
    episodes: usize,
    seed: u64,
) -> Result<(Learner, Vec<EpisodeMetrics>), LearnerError> {
    let mut learner = Learner::new(config, env.states().clone(), env.actions().clone())?;
    let mut rngs = RunRngs::new(seed);
    let mut metrics = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        metrics.push(learner.run_episode(env, &mut rngs, false)?.metrics);
    }
    Ok((learner, metrics))
}

/// Critic used by the actor-critic baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    /// One `V` over joint states sampled from the common belief.
    Centralized,
    /// One `V^j` per agent over its private policy input.
    Decentralized,
}

/// Tabular one-step actor-critic with softmax actors and logistic
/// broadcast policies, or a uniformly random policy when `learning` is off.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub config: LearnerConfig,
    pub kind: CriticKind,
    pub learning: bool,
    states: StateSpace,
    actions: ProductSpace,
    theta: Vec<Vec<f64>>,
    epsilon: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pub episode: usize,
}

impl ActorCritic {
    pub fn new(config: LearnerConfig, kind: CriticKind, states: StateSpace, actions: ProductSpace) -> Result<Self, LearnerError> {
        config.validate()?;
        let agents = states.num_agents();
        let theta = (0..agents).map(|j| vec![0.0; states.policy_inputs(j) * actions.dim(j)]).collect();
        let epsilon = (0..agents).map(|j| vec![0.0; states.policy_inputs(j)]).collect();
        let values = match kind {
            CriticKind::Centralized => vec![vec![0.0; states.size()]],
            CriticKind::Decentralized => (0..agents).map(|j| vec![0.0; states.policy_inputs(j)]).collect(),
        };
        Ok(Self { config, kind, learning: true, states, actions, theta, epsilon, values, episode: 0 })
    }

    /// The uniformly random control policy: no updates, uniform actions,
    /// broadcast probability one half in intermittent mode.
    pub fn random(config: LearnerConfig, states: StateSpace, actions: ProductSpace) -> Result<Self, LearnerError> {
        let mut ac = Self::new(config, CriticKind::Decentralized, states, actions)?;
        ac.learning = false;
        Ok(ac)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn action_probs(&self, j: usize, input: usize) -> Vec<f64> {
        let n = self.actions.dim(j);
        let mut out = vec![0.0; n];
        math::softmax_into(&self.theta[j][input * n..(input + 1) * n], 1.0, &mut out);
        out
    }

    fn value(&self, j: usize, s_hat: usize, s_true: usize) -> f64 {
        match self.kind {
            CriticKind::Centralized => self.values[0][s_hat],
            CriticKind::Decentralized => self.values[j][self.states.policy_input(s_true, j)],
        }
    }

    pub fn run_episode(&mut self, env: &mut dyn Environment, rngs: &mut RunRngs) -> Result<EpisodeMetrics, LearnerError> {
        if env.states() != &self.states || env.actions() != &self.actions {
            return Err(LearnerError::Mismatch);
        }
        let agents = self.states.num_agents();
        let mode = self.config.broadcast_mode;
        let gamma = self.config.discount;
        let scale = self.config.rate_scale(self.episode);
        let cap = env.max_steps();
        // The tracker needs an option pool for the filter; a single-option
        // pool mirrors the actor's current policies.
        let mut pool = self.mirror_pool();

        let mut s = env.reset(&mut rngs.env);
        let mut tracker = Tracker::start(env, s);
        let mut s_hat = tracker.sample(&pool, &mut rngs.belief);
        let mut metrics = EpisodeMetrics { episode: self.episode, ..EpisodeMetrics::default() };
        let mut broadcasts = 0usize;
        let mut broadcast = vec![true; agents];
        let mut parts = vec![0usize; agents];
        for k in 0..cap {
            for (j, part) in parts.iter_mut().enumerate() {
                let probs = self.action_probs(j, self.states.policy_input(s, j));
                *part = sample::categorical(&mut rngs.agent, &probs);
            }
            let a = self.actions.encode(&parts);
            let out = env.step(a, &mut rngs.env);
            let s_next = out.state;
            if mode == BroadcastMode::Intermittent {
                for (j, b) in broadcast.iter_mut().enumerate() {
                    let p = math::sigmoid(self.epsilon[j][self.states.policy_input(s_next, j)]);
                    *b = sample::bernoulli(&mut rngs.agent, p);
                }
            }
            let talkers = broadcast.iter().filter(|&&b| b).count();
            broadcasts += talkers;
            let reward = out.reward + self.config.broadcast_penalty * talkers as f64;
            let common = CommonObservation::assemble(&out.observation, &broadcast);
            tracker.advance(env, &pool, mode, self.config.silence, 0, s_next, &common)?;
            let s_hat_next = tracker.sample(&pool, &mut rngs.belief);
            let mut biggest: f64 = 0.0;
            if self.learning {
                let mut deltas = vec![0.0; self.values.len()];
                for (c, d) in deltas.iter_mut().enumerate() {
                    let next = if out.done { 0.0 } else { self.value(c, s_hat_next, s_next) };
                    *d = reward + gamma * next - self.value(c, s_hat, s);
                }
                for (c, &d) in deltas.iter().enumerate() {
                    let key = match self.kind {
                        CriticKind::Centralized => s_hat,
                        CriticKind::Decentralized => self.states.policy_input(s, c),
                    };
                    let step = self.config.alpha_q * scale * d;
                    self.values[c][key] += step;
                    biggest = biggest.max(step.abs());
                }
                for j in 0..agents {
                    let d = deltas[if self.kind == CriticKind::Centralized { 0 } else { j }];
                    let input = self.states.policy_input(s, j);
                    let n = self.actions.dim(j);
                    let probs = self.action_probs(j, input);
                    let coef = self.config.entropy_coefficient(1);
                    let h: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * math::ln(p)).sum::<f64>();
                    for (b, &p) in probs.iter().enumerate() {
                        let score = if b == parts[j] { 1.0 } else { 0.0 } - p;
                        let ent = if p > 0.0 { -p * (math::ln(p) + h) } else { 0.0 };
                        let step = self.config.alpha_theta * scale * (score * d + coef * ent);
                        self.theta[j][input * n + b] += step;
                        biggest = biggest.max(step.abs());
                    }
                    if mode == BroadcastMode::Intermittent {
                        let input_next = self.states.policy_input(s_next, j);
                        let e = &mut self.epsilon[j][input_next];
                        let p = math::sigmoid(*e);
                        let score = if broadcast[j] { 1.0 - p } else { -p };
                        let step = self.config.alpha_epsilon * scale * (score * d - coef * p * (1.0 - p) * *e);
                        *e += step;
                        biggest = biggest.max(step.abs());
                    }
                }
                pool = self.mirror_pool();
            }
            metrics.total_return += reward;
            metrics.steps += 1;
            metrics.max_update = metrics.max_update.max(biggest);
            s = s_next;
            s_hat = s_hat_next;
            if out.done {
                break;
            }
            metrics.truncated = k + 1 == cap;
        }
        metrics.broadcast_rate = if metrics.steps == 0 { 0.0 } else { broadcasts as f64 / (agents * metrics.steps) as f64 };
        if !self.values.iter().chain(&self.theta).chain(&self.epsilon).flatten().all(|v| v.is_finite()) {
            return Err(LearnerError::NonFinite { table: "actor-critic tables", episode: self.episode });
        }
        self.episode += 1;
        Ok(metrics)
    }

    fn mirror_pool(&self) -> OptionPool {
        let options = (0..self.states.num_agents())
            .map(|j| {
                let n = self.actions.dim(j);
                let mut o = crate::option::MarkovOption::new(0, self.states.policy_inputs(j), n);
                for input in 0..self.states.policy_inputs(j) {
                    o.theta_mut(input).copy_from_slice(&self.theta[j][input * n..(input + 1) * n]);
                    *o.epsilon_mut(input) = self.epsilon[j][input];
                }
                alloc::vec![o]
            })
            .collect();
        OptionPool::new(self.states.clone(), self.actions.clone(), options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentParts;
    use crate::option::MarkovOption;

    fn bandit() -> ModelEnv {
        let a = AgentParts {
            states: 1,
            actions: 2,
            observations: 1,
            transition: vec![vec![(0, 1.0)], vec![(0, 1.0)]],
            observation: vec![vec![(0, 1.0)]],
            reward: vec![1.0, 0.0],
            initial: vec![1.0],
        };
        let m = DecPomdpModel::from_factored(vec![a], 0.0, 0.9, 1.0).unwrap();
        ModelEnv::new(m, 1).with_terminal(vec![true])
    }

    fn bandit_pool(env: &ModelEnv) -> OptionPool {
        let opts = vec![MarkovOption::deterministic(0, 2, &[0], 1.0, 1.0), MarkovOption::deterministic(1, 2, &[1], 1.0, 1.0)];
        OptionPool::new(env.states().clone(), env.actions().clone(), vec![opts])
    }

    #[test]
    fn coe_arithmetic() {
        let env = bandit();
        let pool = bandit_pool(&env);
        let mut critic = CriticTables::for_pool(&pool, BroadcastMode::Always);
        let step = CoeStep { state: 0, omega: 0, action: 0, broadcast: 0, reward: 1.0, next: None };
        let d = coe_update(&mut critic, &pool, &step, 0.9, 0.1);
        assert_eq!(d, 1.0);
        assert_eq!(critic.q_intra(0, 0, 0), 0.1);
    }

    #[test]
    fn coe_bootstraps_on_arrival_value() {
        // β = 1 everywhere, so U(s', ω) = max_ω' Q(s', ω') = 2.
        let env = bandit();
        let pool = bandit_pool(&env);
        let mut critic = CriticTables::for_pool(&pool, BroadcastMode::Always);
        *critic.q_intra_mut(0, 1, 1) = 2.0;
        let step = CoeStep { state: 0, omega: 0, action: 0, broadcast: 0, reward: 1.0, next: Some(0) };
        let d = coe_update(&mut critic, &pool, &step, 0.9, 0.1);
        assert!((d - 2.8).abs() < 1e-15);
    }

    #[test]
    fn softmax_score_update() {
        let env = bandit();
        let pool0 = OptionPool::uniform(env.states().clone(), env.actions().clone(), 1);
        let mut pool = pool0.clone();
        let mut critic = CriticTables::for_pool(&pool, BroadcastMode::Always);
        *critic.q_intra_mut(0, 0, 0) = 1.0;
        let step = DoiStep { sampled: 0, state: 0, omega: 0, action: 0, broadcast: &[true], next: None };
        let rates = DoiRates { theta: 0.1, epsilon: 0.1, phi: 0.1, entropy: 0.0, learn_broadcast: false };
        doi_update(&mut pool, &critic, 0, &step, &rates);
        let t = pool.option(0, 0).theta(0);
        assert!((t[0] - 0.05).abs() < 1e-15 && (t[1] + 0.05).abs() < 1e-15);
        // Zero critic leaves θ unchanged.
        let mut pool = pool0;
        let critic = CriticTables::for_pool(&pool, BroadcastMode::Always);
        doi_update(&mut pool, &critic, 0, &step, &rates);
        assert_eq!(pool.option(0, 0).theta(0), &[0.0, 0.0]);
    }

    #[test]
    fn greedy_choice_and_reselect() {
        let env = bandit();
        let pool = bandit_pool(&env);
        let mut critic = CriticTables::for_pool(&pool, BroadcastMode::Always);
        let mut rng = stream_rng(1, 0);
        assert_eq!(greedy_reselect(&critic, &pool, 0, 1, &[true]), 0);
        *critic.q_intra_mut(0, 1, 1) = 1.0;
        let e = Exploration::EpsilonGreedy { start: 0.0, end: 0.0, decay: 1.0 };
        for _ in 0..100 {
            assert_eq!(choose_joint_option(&critic, &pool, 0, e, 0.0, &mut rng), 1);
        }
        assert_eq!(greedy_reselect(&critic, &pool, 0, 0, &[true]), 1);
    }

    #[test]
    fn exploration_schedule() {
        let c = LearnerConfig::default();
        assert_eq!(c.explore_epsilon(0), 0.9);
        assert_eq!(c.explore_epsilon(100_000), 0.05);
        assert!((c.explore_epsilon(1) - 0.9 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn always_mode_broadcast_rate_is_one() {
        let mut env = bandit();
        let cfg = LearnerConfig { options_per_agent: 1, ..LearnerConfig::default() };
        let (_, metrics) = train(&mut env, cfg, 20, 4).unwrap();
        assert!(metrics.iter().all(|m| m.broadcast_rate == 1.0 && m.steps == 1));
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = LearnerConfig { alpha_q: 1.5, ..LearnerConfig::default() };
        match cfg.validate() {
            Err(LearnerError::Config { field, .. }) => assert_eq!(field, "alpha_q"),
            other => panic!("{other:?}"),
        }
    }
}

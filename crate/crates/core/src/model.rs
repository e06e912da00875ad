//! Finite factored Dec-POMDP model.
//!
//! Joint states, actions and observations are flat indices over the
//! [`StateSpace`] / [`ProductSpace`] of the model. Kernels are stored as
//! compressed sparse rows: the transition row for `(s, a)` is
//! `s * |A| + a`, and the observation row for an arrived state `s'` is `s'`
//! (or `s' * |A| + a_prev` when the kernel depends on the previous action).

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;
use thiserror::Error;

use crate::sample;
use crate::space::{ProductSpace, StateSpace};

/// Tolerance for "sums to one" and product-decomposition checks.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Compressed sparse rows of `(column, probability)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseMatrix {
    pub fn from_rows<I, R>(rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = (usize, f64)>,
    {
        let mut m = Self { offsets: vec![0], entries: Vec::new() };
        for row in rows {
            m.push_row(row);
        }
        m
    }

    pub fn with_capacity(rows: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        Self { offsets, entries: Vec::with_capacity(entries) }
    }

    pub fn push_row<R: IntoIterator<Item = (usize, f64)>>(&mut self, row: R) {
        self.entries.extend(row);
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> core::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Observation kernel η.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationKernel {
    /// η(o | s'), one row per joint state.
    StateOnly(SparseMatrix),
    /// η(o | s', a_prev), row `s' * |A| + a_prev`.
    ActionDependent(SparseMatrix),
}

impl ObservationKernel {
    pub fn matrix(&self) -> &SparseMatrix {
        match self {
            Self::StateOnly(m) | Self::ActionDependent(m) => m,
        }
    }
}

/// Reward function.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// Reward-independent form: `R^j(s^j, a^j, s'^j)` per agent, dense and
    /// indexed `(s^j * |A^j| + a^j) * |S^j| + s'^j`.
    PerAgent(Vec<Vec<f64>>),
    /// Joint `R(s, a, s')`, one value per transition-matrix entry.
    Joint(Vec<f64>),
}

/// Per-agent kernels of a factored model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredKernels {
    /// `transitions[j]` has row `s^j * |A^j| + a^j` over `S^j`.
    pub transitions: Vec<SparseMatrix>,
    /// `observations[j]` has row `s^j` over `O^j`.
    pub observations: Vec<SparseMatrix>,
}

/// Everything needed to build a [`DecPomdpModel`].
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub states: StateSpace,
    pub actions: ProductSpace,
    pub observations: ProductSpace,
    pub transition: SparseMatrix,
    pub observation: ObservationKernel,
    pub reward: RewardModel,
    pub broadcast_penalty: f64,
    pub discount: f64,
    pub initial: Vec<f64>,
    pub reward_bound: f64,
    pub factored: Option<FactoredKernels>,
}

/// Per-agent description used by [`DecPomdpModel::from_factored`].
#[derive(Debug, Clone)]
pub struct AgentParts {
    pub states: usize,
    pub actions: usize,
    pub observations: usize,
    /// Row `s * actions + a` over `0..states`.
    pub transition: Vec<Vec<(usize, f64)>>,
    /// Row `s` over `0..observations`.
    pub observation: Vec<Vec<(usize, f64)>>,
    /// Dense `(s * actions + a) * states + s'`.
    pub reward: Vec<f64>,
    /// Initial marginal over `0..states`.
    pub initial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model needs at least one agent")]
    NoAgents,
    #[error("{what}: expected {expected} entries, found {found}")]
    Size { what: &'static str, expected: usize, found: usize },
    #[error("{what}: index {index} out of range {bound}")]
    Index { what: &'static str, index: usize, bound: usize },
    #[error("discount {0} outside (0, 1)")]
    Discount(f64),
    #[error("broadcast penalty {0} must be <= 0")]
    BroadcastPenalty(f64),
    #[error("factored kernels require a model without a shared state component")]
    FactoredShared,
    #[error("factored kernels require an action-independent observation kernel")]
    FactoredObservation,
}

/// One failed model invariant. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TransitionRow { state: usize, action: usize, sum: f64 },
    ObservationRow { state: usize, prev_action: Option<usize>, sum: f64 },
    NegativeProbability { kernel: &'static str, row: usize, column: usize, value: f64 },
    InitialDistribution { sum: f64 },
    Reward { state: usize, action: usize, next: usize, value: f64, bound: f64 },
    AgentReward { agent: usize, index: usize, value: f64, bound: f64 },
    FactoredTransition { state: usize, action: usize, next: usize, joint: f64, product: f64 },
    FactoredObservation { state: usize, observation: usize, joint: f64, product: f64 },
    FactoredKernelRow { agent: usize, kernel: &'static str, row: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TransitionRow { state, action, sum } => {
                write!(f, "transition row (s={state}, a={action}) sums to {sum}")
            }
            Self::ObservationRow { state, prev_action: Some(a), sum } => {
                write!(f, "observation row (s'={state}, a={a}) sums to {sum}")
            }
            Self::ObservationRow { state, prev_action: None, sum } => {
                write!(f, "observation row (s'={state}) sums to {sum}")
            }
            Self::NegativeProbability { kernel, row, column, value } => {
                write!(f, "{kernel} row {row} column {column} is negative ({value})")
            }
            Self::InitialDistribution { sum } => write!(f, "initial distribution sums to {sum}"),
            Self::Reward { state, action, next, value, bound } => {
                write!(f, "reward R(s={state}, a={action}, s'={next}) = {value} exceeds bound {bound}")
            }
            Self::AgentReward { agent, index, value, bound } => {
                write!(f, "agent {agent} reward entry {index} = {value} exceeds bound {bound}")
            }
            Self::FactoredTransition { state, action, next, joint, product } => {
                write!(f, "transition (s={state}, a={action}, s'={next}) is {joint}, per-agent product is {product}")
            }
            Self::FactoredObservation { state, observation, joint, product } => {
                write!(f, "observation (s'={state}, o={observation}) is {joint}, per-agent product is {product}")
            }
            Self::FactoredKernelRow { agent, kernel, row, sum } => {
                write!(f, "agent {agent} {kernel} row {row} sums to {sum}")
            }
        }
    }
}

/// Finite Dec-POMDP with broadcast penalty and discount.
#[derive(Debug, Clone, PartialEq)]
pub struct DecPomdpModel {
    states: StateSpace,
    actions: ProductSpace,
    observations: ProductSpace,
    transition: SparseMatrix,
    observation: ObservationKernel,
    reward: RewardModel,
    broadcast_penalty: f64,
    discount: f64,
    initial: Vec<f64>,
    reward_bound: f64,
    factored: Option<FactoredKernels>,
}

impl DecPomdpModel {
    /// Checks shapes and index ranges. Numerical invariants are reported by
    /// [`DecPomdpModel::validate`].
    pub fn new(parts: ModelParts) -> Result<Self, ModelError> {
        let j = parts.states.num_agents();
        if j == 0 {
            return Err(ModelError::NoAgents);
        }
        for (what, n) in [("actions", parts.actions.len()), ("observations", parts.observations.len())] {
            if n != j {
                return Err(ModelError::Size { what, expected: j, found: n });
            }
        }
        if !(parts.discount > 0.0 && parts.discount < 1.0) {
            return Err(ModelError::Discount(parts.discount));
        }
        if !(parts.broadcast_penalty <= 0.0) {
            return Err(ModelError::BroadcastPenalty(parts.broadcast_penalty));
        }
        let ns = parts.states.size();
        let na = parts.actions.size();
        let no = parts.observations.size();
        check_matrix("transition rows", &parts.transition, ns * na, ns)?;
        match &parts.observation {
            ObservationKernel::StateOnly(m) => check_matrix("observation rows", m, ns, no)?,
            ObservationKernel::ActionDependent(m) => check_matrix("observation rows", m, ns * na, no)?,
        }
        if parts.initial.len() != ns {
            return Err(ModelError::Size { what: "initial distribution", expected: ns, found: parts.initial.len() });
        }
        match &parts.reward {
            RewardModel::PerAgent(tables) => {
                if tables.len() != j {
                    return Err(ModelError::Size { what: "per-agent rewards", expected: j, found: tables.len() });
                }
                for (k, t) in tables.iter().enumerate() {
                    let n = parts.states.agent_size(k);
                    let expected = n * parts.actions.dim(k) * n;
                    if t.len() != expected {
                        return Err(ModelError::Size { what: "agent reward table", expected, found: t.len() });
                    }
                }
            }
            RewardModel::Joint(values) => {
                if values.len() != parts.transition.nnz() {
                    return Err(ModelError::Size {
                        what: "joint rewards",
                        expected: parts.transition.nnz(),
                        found: values.len(),
                    });
                }
            }
        }
        if let Some(f) = &parts.factored {
            if parts.states.shared_size() != 1 {
                return Err(ModelError::FactoredShared);
            }
            if !matches!(parts.observation, ObservationKernel::StateOnly(_)) {
                return Err(ModelError::FactoredObservation);
            }
            if f.transitions.len() != j || f.observations.len() != j {
                return Err(ModelError::Size {
                    what: "factored kernels",
                    expected: j,
                    found: f.transitions.len().min(f.observations.len()),
                });
            }
            for k in 0..j {
                let n = parts.states.agent_size(k);
                check_matrix("agent transition rows", &f.transitions[k], n * parts.actions.dim(k), n)?;
                check_matrix("agent observation rows", &f.observations[k], n, parts.observations.dim(k))?;
            }
        }
        Ok(Self {
            states: parts.states,
            actions: parts.actions,
            observations: parts.observations,
            transition: parts.transition,
            observation: parts.observation,
            reward: parts.reward,
            broadcast_penalty: parts.broadcast_penalty,
            discount: parts.discount,
            initial: parts.initial,
            reward_bound: parts.reward_bound,
            factored: parts.factored,
        })
    }

    /// Builds the joint model of independent agents: joint kernels are the
    /// products of the per-agent kernels and the model is flagged factored.
    pub fn from_factored(
        agents: Vec<AgentParts>,
        broadcast_penalty: f64,
        discount: f64,
        reward_bound: f64,
    ) -> Result<Self, ModelError> {
        if agents.is_empty() {
            return Err(ModelError::NoAgents);
        }
        let states = StateSpace::new(agents.iter().map(|a| a.states).collect());
        let actions = ProductSpace::new(agents.iter().map(|a| a.actions).collect());
        let observations = ProductSpace::new(agents.iter().map(|a| a.observations).collect());
        for a in &agents {
            if a.transition.len() != a.states * a.actions {
                return Err(ModelError::Size {
                    what: "agent transition rows",
                    expected: a.states * a.actions,
                    found: a.transition.len(),
                });
            }
            if a.observation.len() != a.states {
                return Err(ModelError::Size { what: "agent observation rows", expected: a.states, found: a.observation.len() });
            }
            if a.initial.len() != a.states {
                return Err(ModelError::Size { what: "agent initial marginal", expected: a.states, found: a.initial.len() });
            }
        }
        let j = agents.len();
        let ns = states.size();
        let na = actions.size();
        let mut s_parts = vec![0; j];
        let mut a_parts = vec![0; j];
        let mut transition = SparseMatrix::with_capacity(ns * na, ns * na);
        for s in 0..ns {
            states.agents().decode_into(s, &mut s_parts);
            for a in 0..na {
                actions.decode_into(a, &mut a_parts);
                let rows: Vec<&[(usize, f64)]> =
                    (0..j).map(|k| agents[k].transition[s_parts[k] * agents[k].actions + a_parts[k]].as_slice()).collect();
                transition.push_row(product_row(states.agents(), &rows));
            }
        }
        let mut observation = SparseMatrix::with_capacity(ns, ns);
        for s in 0..ns {
            states.agents().decode_into(s, &mut s_parts);
            let rows: Vec<&[(usize, f64)]> = (0..j).map(|k| agents[k].observation[s_parts[k]].as_slice()).collect();
            observation.push_row(product_row(&observations, &rows));
        }
        let mut initial = vec![0.0; ns];
        for (s, p) in initial.iter_mut().enumerate() {
            states.agents().decode_into(s, &mut s_parts);
            *p = (0..j).map(|k| agents[k].initial[s_parts[k]]).product();
        }
        let factored = FactoredKernels {
            transitions: agents.iter().map(|a| SparseMatrix::from_rows(a.transition.iter().map(|r| r.iter().copied()))).collect(),
            observations: agents
                .iter()
                .map(|a| SparseMatrix::from_rows(a.observation.iter().map(|r| r.iter().copied())))
                .collect(),
        };
        Self::new(ModelParts {
            states,
            actions,
            observations,
            transition,
            observation: ObservationKernel::StateOnly(observation),
            reward: RewardModel::PerAgent(agents.into_iter().map(|a| a.reward).collect()),
            broadcast_penalty,
            discount,
            initial,
            reward_bound,
            factored: Some(factored),
        })
    }

    pub fn num_agents(&self) -> usize {
        self.states.num_agents()
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn actions(&self) -> &ProductSpace {
        &self.actions
    }

    pub fn observations(&self) -> &ProductSpace {
        &self.observations
    }

    pub fn num_states(&self) -> usize {
        self.states.size()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.size()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn broadcast_penalty(&self) -> f64 {
        self.broadcast_penalty
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn reward_model(&self) -> &RewardModel {
        &self.reward
    }

    pub fn transition_matrix(&self) -> &SparseMatrix {
        &self.transition
    }

    pub fn observation_kernel(&self) -> &ObservationKernel {
        &self.observation
    }

    pub fn factored(&self) -> Option<&FactoredKernels> {
        self.factored.as_ref()
    }

    pub fn observation_depends_on_action(&self) -> bool {
        matches!(self.observation, ObservationKernel::ActionDependent(_))
    }

    /// Returns the same model with a different discount and broadcast penalty.
    pub fn with_discount_and_penalty(mut self, discount: f64, penalty: f64) -> Result<Self, ModelError> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(ModelError::Discount(discount));
        }
        if !(penalty <= 0.0) {
            return Err(ModelError::BroadcastPenalty(penalty));
        }
        self.discount = discount;
        self.broadcast_penalty = penalty;
        Ok(self)
    }

    /// `p^a(s, ·)` as sparse `(s', p)` pairs.
    pub fn transition_row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        assert!(s < self.num_states() && a < self.num_actions(), "state/action out of range");
        self.transition.row(s * self.num_actions() + a)
    }

    /// `η(· | s', a_prev)` as sparse `(o, p)` pairs.
    pub fn observation_row(&self, s_next: usize, a_prev: usize) -> &[(usize, f64)] {
        assert!(s_next < self.num_states() && a_prev < self.num_actions(), "state/action out of range");
        match &self.observation {
            ObservationKernel::StateOnly(m) => m.row(s_next),
            ObservationKernel::ActionDependent(m) => m.row(s_next * self.num_actions() + a_prev),
        }
    }

    /// Environment reward `R(s, a, s')` without the broadcast term.
    pub fn reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        assert!(s < self.num_states() && a < self.num_actions() && s_next < self.num_states(), "index out of range");
        match &self.reward {
            RewardModel::PerAgent(tables) => (0..self.num_agents())
                .map(|j| {
                    let n = self.states.agent_size(j);
                    let idx = (self.states.local(s, j) * self.actions.dim(j) + self.actions.component(a, j)) * n
                        + self.states.local(s_next, j);
                    tables[j][idx]
                })
                .sum(),
            RewardModel::Joint(values) => {
                let row = s * self.num_actions() + a;
                self.transition.row_range(row).find(|&e| self.transition.entries[e].0 == s_next).map(|e| values[e]).unwrap_or(0.0)
            }
        }
    }

    /// `Σ_j R^j(s^j, a^j, s'^j) + B · Σ_j br^j`.
    pub fn joint_reward(&self, s: usize, a: usize, s_next: usize, broadcast: &[bool]) -> f64 {
        assert_eq!(broadcast.len(), self.num_agents(), "one broadcast bit per agent");
        let talkers = broadcast.iter().filter(|&&b| b).count();
        self.reward(s, a, s_next) + self.broadcast_penalty * talkers as f64
    }

    /// `Σ_{s'} p^a(s, s') R(s, a, s')`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        let row = s * self.num_actions() + a;
        match &self.reward {
            RewardModel::Joint(values) => self.transition.row_range(row).map(|e| self.transition.entries[e].1 * values[e]).sum(),
            RewardModel::PerAgent(_) => self.transition.row(row).iter().map(|&(s2, p)| p * self.reward(s, a, s2)).sum(),
        }
    }

    pub fn sample_transition<R: RngCore + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample::categorical_sparse(rng, self.transition_row(s, a))
    }

    pub fn sample_observation<R: RngCore + ?Sized>(&self, s_next: usize, a_prev: usize, rng: &mut R) -> usize {
        sample::categorical_sparse(rng, self.observation_row(s_next, a_prev))
    }

    pub fn sample_initial<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        sample::categorical(rng, &self.initial)
    }

    /// Largest |R| over all transition entries (broadcast term excluded).
    pub fn max_abs_reward(&self) -> f64 {
        match &self.reward {
            RewardModel::Joint(values) => values.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
            RewardModel::PerAgent(tables) => tables.iter().map(|t| t.iter().fold(0.0, |m: f64, v| m.max(v.abs()))).sum(),
        }
    }

    /// Lists every violated invariant; empty iff the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let ns = self.num_states();
        let na = self.num_actions();
        for s in 0..ns {
            for a in 0..na {
                let row = self.transition.row(s * na + a);
                check_row(&mut out, "transition", s * na + a, row);
                let sum: f64 = row.iter().map(|e| e.1).sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    out.push(Violation::TransitionRow { state: s, action: a, sum });
                }
            }
        }
        match &self.observation {
            ObservationKernel::StateOnly(m) => {
                for s in 0..ns {
                    check_row(&mut out, "observation", s, m.row(s));
                    let sum: f64 = m.row(s).iter().map(|e| e.1).sum();
                    if (sum - 1.0).abs() > ROW_TOLERANCE {
                        out.push(Violation::ObservationRow { state: s, prev_action: None, sum });
                    }
                }
            }
            ObservationKernel::ActionDependent(m) => {
                for s in 0..ns {
                    for a in 0..na {
                        check_row(&mut out, "observation", s * na + a, m.row(s * na + a));
                        let sum: f64 = m.row(s * na + a).iter().map(|e| e.1).sum();
                        if (sum - 1.0).abs() > ROW_TOLERANCE {
                            out.push(Violation::ObservationRow { state: s, prev_action: Some(a), sum });
                        }
                    }
                }
            }
        }
        check_row(&mut out, "initial", 0, &self.initial.iter().copied().enumerate().collect::<Vec<_>>());
        let sum: f64 = self.initial.iter().sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            out.push(Violation::InitialDistribution { sum });
        }
        let bound = self.reward_bound;
        match &self.reward {
            RewardModel::Joint(values) => {
                for s in 0..ns {
                    for a in 0..na {
                        for e in self.transition.row_range(s * na + a) {
                            let v = values[e];
                            if !v.is_finite() || v.abs() > bound {
                                out.push(Violation::Reward {
                                    state: s,
                                    action: a,
                                    next: self.transition.entries[e].0,
                                    value: v,
                                    bound,
                                });
                            }
                        }
                    }
                }
            }
            RewardModel::PerAgent(tables) => {
                for (agent, t) in tables.iter().enumerate() {
                    for (index, &v) in t.iter().enumerate() {
                        if !v.is_finite() || v.abs() > bound {
                            out.push(Violation::AgentReward { agent, index, value: v, bound });
                        }
                    }
                }
            }
        }
        if let Some(f) = &self.factored {
            self.validate_factored(f, &mut out);
        }
        out
    }

    fn validate_factored(&self, f: &FactoredKernels, out: &mut Vec<Violation>) {
        let j = self.num_agents();
        for k in 0..j {
            for (kernel, m) in [("transition", &f.transitions[k]), ("observation", &f.observations[k])] {
                for row in 0..m.rows() {
                    let sum: f64 = m.row(row).iter().map(|e| e.1).sum();
                    if (sum - 1.0).abs() > ROW_TOLERANCE {
                        out.push(Violation::FactoredKernelRow { agent: k, kernel, row, sum });
                    }
                }
            }
        }
        let ns = self.num_states();
        let na = self.num_actions();
        let mut s_parts = vec![0; j];
        let mut a_parts = vec![0; j];
        for s in 0..ns {
            self.states.agents().decode_into(s, &mut s_parts);
            for a in 0..na {
                self.actions.decode_into(a, &mut a_parts);
                let rows: Vec<&[(usize, f64)]> =
                    (0..j).map(|k| f.transitions[k].row(s_parts[k] * self.actions.dim(k) + a_parts[k])).collect();
                let product = to_map(product_row(self.states.agents(), &rows));
                let joint = to_map(self.transition_row(s, a).iter().copied());
                for (next, joint_p, product_p) in merged(&joint, &product) {
                    if (joint_p - product_p).abs() > ROW_TOLERANCE {
                        out.push(Violation::FactoredTransition { state: s, action: a, next, joint: joint_p, product: product_p });
                    }
                }
            }
            let rows: Vec<&[(usize, f64)]> = (0..j).map(|k| f.observations[k].row(s_parts[k])).collect();
            let product = to_map(product_row(&self.observations, &rows));
            let joint = to_map(self.observation_row(s, 0).iter().copied());
            for (o, joint_p, product_p) in merged(&joint, &product) {
                if (joint_p - product_p).abs() > ROW_TOLERANCE {
                    out.push(Violation::FactoredObservation { state: s, observation: o, joint: joint_p, product: product_p });
                }
            }
        }
    }
}

fn check_matrix(what: &'static str, m: &SparseMatrix, rows: usize, columns: usize) -> Result<(), ModelError> {
    if m.rows() != rows {
        return Err(ModelError::Size { what, expected: rows, found: m.rows() });
    }
    if let Some(&(index, _)) = m.entries.iter().find(|e| e.0 >= columns) {
        return Err(ModelError::Index { what, index, bound: columns });
    }
    Ok(())
}

fn check_row(out: &mut Vec<Violation>, kernel: &'static str, row: usize, entries: &[(usize, f64)]) {
    for &(column, value) in entries {
        if value < 0.0 || !value.is_finite() {
            out.push(Violation::NegativeProbability { kernel, row, column, value });
        }
    }
}

/// Product of independent per-component sparse rows over `space`.
pub(crate) fn product_row(space: &ProductSpace, rows: &[&[(usize, f64)]]) -> Vec<(usize, f64)> {
    let mut acc: Vec<(usize, f64)> = vec![(0, 1.0)];
    for (k, row) in rows.iter().enumerate() {
        let mut next = Vec::with_capacity(acc.len() * row.len());
        for &(idx, p) in &acc {
            for &(c, q) in row.iter() {
                next.push((idx + c * space.stride(k), p * q));
            }
        }
        acc = next;
    }
    acc.sort_by_key(|e| e.0);
    acc
}

fn to_map<I: IntoIterator<Item = (usize, f64)>>(entries: I) -> BTreeMap<usize, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in entries {
        *m.entry(k).or_insert(0.0) += v;
    }
    m
}

fn merged(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> Vec<(usize, f64, f64)> {
    let mut keys: Vec<usize> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter().map(|k| (k, a.get(&k).copied().unwrap_or(0.0), b.get(&k).copied().unwrap_or(0.0))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::stream_rng;

    fn identity_agent(states: usize, actions: usize) -> AgentParts {
        AgentParts {
            states,
            actions,
            observations: states,
            transition: (0..states * actions).map(|r| vec![(r / actions, 1.0)]).collect(),
            observation: (0..states).map(|s| vec![(s, 1.0)]).collect(),
            reward: vec![0.0; states * actions * states],
            initial: {
                let mut v = vec![0.0; states];
                v[0] = 1.0;
                v
            },
        }
    }

    fn single_agent(transition: Vec<Vec<(usize, f64)>>, states: usize, actions: usize) -> DecPomdpModel {
        let mut a = identity_agent(states, actions);
        a.transition = transition;
        let parts = ModelParts {
            states: StateSpace::new(vec![states]),
            actions: ProductSpace::new(vec![actions]),
            observations: ProductSpace::new(vec![states]),
            transition: SparseMatrix::from_rows(a.transition.iter().map(|r| r.iter().copied())),
            observation: ObservationKernel::StateOnly(SparseMatrix::from_rows(a.observation.iter().map(|r| r.iter().copied()))),
            reward: RewardModel::PerAgent(vec![a.reward]),
            broadcast_penalty: 0.0,
            discount: 0.9,
            initial: a.initial,
            reward_bound: 1.0,
            factored: None,
        };
        DecPomdpModel::new(parts).unwrap()
    }

    #[test]
    fn identity_model_is_valid() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(3, 2), identity_agent(2, 2)], -0.1, 0.9, 1.0).unwrap();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
    }

    #[test]
    fn short_row_is_reported_once() {
        let m = single_agent(vec![vec![(0, 1.0)], vec![(1, 0.9)], vec![(0, 1.0)], vec![(1, 1.0)]], 2, 2);
        let v = m.validate();
        assert_eq!(v.len(), 1);
        match v[0] {
            Violation::TransitionRow { state, action, sum } => {
                assert_eq!((state, action), (0, 1));
                assert!((sum - 0.9).abs() < 1e-15);
            }
            ref other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn product_kernel_decomposes() {
        // Random-ish stochastic per-agent kernels; from_factored builds the
        // joint product, and an independent triple loop recomputes it.
        let mut a = identity_agent(2, 2);
        a.transition = vec![vec![(0, 0.3), (1, 0.7)], vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]];
        let mut b = identity_agent(3, 2);
        b.transition = (0..6).map(|r| vec![((r + 1) % 3, 0.25), (r % 3, 0.75)]).collect();
        let m = DecPomdpModel::from_factored(vec![a.clone(), b.clone()], 0.0, 0.5, 1.0).unwrap();
        assert!(m.validate().is_empty());
        for s in 0..6 {
            for act in 0..4 {
                let (s1, s2) = (s / 3, s % 3);
                let (a1, a2) = (act / 2, act % 2);
                for s_next in 0..6 {
                    let (n1, n2) = (s_next / 3, s_next % 3);
                    let p1: f64 = a.transition[s1 * 2 + a1].iter().filter(|e| e.0 == n1).map(|e| e.1).sum();
                    let p2: f64 = b.transition[s2 * 2 + a2].iter().filter(|e| e.0 == n2).map(|e| e.1).sum();
                    let joint: f64 = m.transition_row(s, act).iter().filter(|e| e.0 == s_next).map(|e| e.1).sum();
                    assert!((joint - p1 * p2).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn mismatched_factored_flag_is_reported() {
        let mut m = DecPomdpModel::from_factored(vec![identity_agent(2, 1), identity_agent(2, 1)], 0.0, 0.5, 1.0).unwrap();
        // Couple the agents: joint state (1,1) now jumps to (0,0).
        let rows: Vec<Vec<(usize, f64)>> = (0..4).map(|s| if s == 3 { vec![(0, 1.0)] } else { vec![(s, 1.0)] }).collect();
        m.transition = SparseMatrix::from_rows(rows.iter().map(|r| r.iter().copied()));
        let v = m.validate();
        assert!(v.iter().any(|x| matches!(x, Violation::FactoredTransition { state: 3, .. })));
    }

    #[test]
    fn joint_reward_adds_broadcast_cost() {
        let mut a = identity_agent(1, 1);
        a.reward = vec![1.0];
        let mut b = identity_agent(1, 1);
        b.reward = vec![0.0];
        let m = DecPomdpModel::from_factored(vec![a.clone(), b.clone()], -0.5, 0.9, 1.0).unwrap();
        assert_eq!(m.joint_reward(0, 0, 0, &[true, true]), 0.0);
        assert_eq!(m.joint_reward(0, 0, 0, &[false, false]), 1.0);
        a.reward = vec![0.3];
        b.reward = vec![0.2];
        let m = DecPomdpModel::from_factored(vec![a, b], -0.01, 0.9, 1.0).unwrap();
        assert!((m.joint_reward(0, 0, 0, &[true, false]) - 0.49).abs() < 1e-15);
    }

    #[test]
    fn deterministic_kernel_sampling() {
        let m = single_agent(vec![vec![(1, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)]], 2, 2);
        for seed in 0..50 {
            let mut rng = stream_rng(seed, 0);
            assert_eq!(m.sample_transition(0, 0, &mut rng), 1);
            assert_eq!(m.sample_observation(1, 0, &mut rng), 1);
        }
    }

    #[test]
    fn uniform_kernel_frequencies() {
        let row = vec![(0, 0.5), (1, 0.5)];
        let m = single_agent(vec![row.clone(), row.clone(), row.clone(), row], 2, 2);
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        let hits = (0..n).filter(|_| m.sample_transition(0, 0, &mut rng) == 0).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let parts = ModelParts {
            states: StateSpace::new(vec![2]),
            actions: ProductSpace::new(vec![1]),
            observations: ProductSpace::new(vec![2]),
            transition: SparseMatrix::from_rows([[(0usize, 1.0)]]),
            observation: ObservationKernel::StateOnly(SparseMatrix::from_rows([[(0usize, 1.0)], [(1, 1.0)]])),
            reward: RewardModel::Joint(vec![0.0]),
            broadcast_penalty: 0.0,
            discount: 0.9,
            initial: vec![1.0, 0.0],
            reward_bound: 1.0,
            factored: None,
        };
        assert!(matches!(DecPomdpModel::new(parts.clone()), Err(ModelError::Size { .. })));
        let mut p = parts;
        p.transition = SparseMatrix::from_rows([[(0usize, 1.0)], [(5, 1.0)]]);
        p.reward = RewardModel::Joint(vec![0.0, 0.0]);
        assert!(matches!(DecPomdpModel::new(p.clone()), Err(ModelError::Index { index: 5, .. })));
        p.transition = SparseMatrix::from_rows([[(0usize, 1.0)], [(1, 1.0)]]);
        p.discount = 1.0;
        assert_eq!(DecPomdpModel::new(p).unwrap_err(), ModelError::Discount(1.0));
    }
}

//! Random valid models and option pools, for tests and certificates.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::model::{AgentParts, DecPomdpModel, ModelParts, ObservationKernel, RewardModel, SparseMatrix};
use crate::option::{MarkovOption, OptionPool};
use crate::sample;
use crate::space::{ProductSpace, StateSpace};

/// Shape of a random joint model.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomModel {
    pub shared: usize,
    pub agent_states: Vec<usize>,
    pub agent_actions: Vec<usize>,
    pub agent_observations: Vec<usize>,
    pub discount: f64,
    pub broadcast_penalty: f64,
    /// Successors per transition row (capped at the number of states).
    pub branching: usize,
    /// Use the identity observation on local states (needs
    /// `agent_observations == agent_states`).
    pub identity_observations: bool,
}

impl RandomModel {
    pub fn new(agent_states: Vec<usize>, agent_actions: Vec<usize>, discount: f64) -> Self {
        Self {
            shared: 1,
            agent_observations: agent_states.clone(),
            agent_states,
            agent_actions,
            discount,
            broadcast_penalty: 0.0,
            branching: 3,
            identity_observations: false,
        }
    }
}

fn random_row<R: RngCore + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<(usize, f64)> {
    let k = k.clamp(1, n);
    let mut cols: Vec<usize> = Vec::with_capacity(k);
    while cols.len() < k {
        let c = sample::index(rng, n);
        if !cols.contains(&c) {
            cols.push(c);
        }
    }
    cols.sort_unstable();
    let weights: Vec<f64> = cols.iter().map(|_| 0.05 + sample::uniform(rng)).collect();
    let total: f64 = weights.iter().sum();
    let mut row: Vec<(usize, f64)> = cols.into_iter().zip(weights).map(|(c, w)| (c, w / total)).collect();
    // Rounding residue goes to the last entry.
    let head: f64 = row[..row.len() - 1].iter().map(|e| e.1).sum();
    let last = row.len() - 1;
    row[last].1 = 1.0 - head;
    row
}

fn random_distribution<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n];
    for (c, p) in random_row(rng, n, n) {
        d[c] = p;
    }
    d
}

/// Random joint model with joint rewards in `[-1, 1]`.
pub fn random_model<R: RngCore + ?Sized>(rng: &mut R, spec: &RandomModel) -> DecPomdpModel {
    let states = StateSpace::with_shared(spec.shared, spec.agent_states.clone());
    let actions = ProductSpace::new(spec.agent_actions.clone());
    let observations = ProductSpace::new(spec.agent_observations.clone());
    let (ns, na, no) = (states.size(), actions.size(), observations.size());
    let mut transition = SparseMatrix::with_capacity(ns * na, ns * na * spec.branching);
    let mut reward = Vec::new();
    for _ in 0..ns * na {
        let row = random_row(rng, ns, spec.branching);
        for _ in &row {
            reward.push(2.0 * sample::uniform(rng) - 1.0);
        }
        transition.push_row(row);
    }
    let observation = if spec.identity_observations {
        assert_eq!(spec.agent_observations, spec.agent_states, "identity observations need |O^j| = |S^j|");
        let local = states.agents().size();
        SparseMatrix::from_rows((0..ns).map(|s| [(s % local, 1.0)]))
    } else {
        SparseMatrix::from_rows((0..ns).map(|_| random_row(rng, no, 2)))
    };
    DecPomdpModel::new(ModelParts {
        states,
        actions,
        observations,
        transition,
        observation: ObservationKernel::StateOnly(observation),
        reward: RewardModel::Joint(reward),
        broadcast_penalty: spec.broadcast_penalty,
        discount: spec.discount,
        initial: random_distribution(rng, ns),
        reward_bound: 1.0,
        factored: None,
    })
    .expect("generated shapes are consistent")
}

/// Random fully factored model of independent agents.
pub fn random_factored<R: RngCore + ?Sized>(
    rng: &mut R,
    agent_states: &[usize],
    agent_actions: &[usize],
    agent_observations: &[usize],
    discount: f64,
) -> DecPomdpModel {
    let agents = agent_states
        .iter()
        .zip(agent_actions)
        .zip(agent_observations)
        .map(|((&n, &a), &o)| AgentParts {
            states: n,
            actions: a,
            observations: o,
            transition: (0..n * a).map(|_| random_row(rng, n, 2)).collect(),
            observation: (0..n).map(|_| random_row(rng, o, 2)).collect(),
            reward: (0..n * a * n).map(|_| 2.0 * sample::uniform(rng) - 1.0).collect(),
            initial: random_distribution(rng, n),
        })
        .collect();
    DecPomdpModel::from_factored(agents, 0.0, discount, agent_states.len() as f64).expect("generated shapes are consistent")
}

/// `count` options per agent with parameters uniform in `[-scale, scale]`.
pub fn random_pool<R: RngCore + ?Sized>(
    rng: &mut R,
    states: &StateSpace,
    actions: &ProductSpace,
    count: usize,
    scale: f64,
) -> OptionPool {
    let options = (0..states.num_agents())
        .map(|j| {
            (0..count)
                .map(|id| {
                    let mut o = MarkovOption::new(id, states.policy_inputs(j), actions.dim(j));
                    let (t, e, p) = o.params_mut();
                    for v in t.iter_mut().chain(e.iter_mut()).chain(p.iter_mut()) {
                        *v = scale * (2.0 * sample::uniform(rng) - 1.0);
                    }
                    o
                })
                .collect()
        })
        .collect();
    OptionPool::new(states.clone(), actions.clone(), options)
}

//! Common-information belief filtering.
//!
//! A [`CommonBelief`] is a distribution over joint states given everything
//! that has been broadcast so far. One filter step first conditions on the
//! common observation (the observation components of the agents that chose
//! to broadcast) and then pushes the result through the joint intra-option
//! policy and the transition kernel.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::RngCore;
use thiserror::Error;

use crate::model::DecPomdpModel;
use crate::option::OptionPool;
use crate::sample;

/// Beliefs must sum to one within this tolerance.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

static NORMALIZATION_CHECKS: AtomicUsize = AtomicUsize::new(0);

/// Number of beliefs whose normalization has been asserted in this process.
pub fn normalization_checks() -> usize {
    NORMALIZATION_CHECKS.load(Ordering::Relaxed)
}

fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn assert_normalized(probs: &[f64]) {
    let total = compensated_sum(probs);
    assert!((total - 1.0).abs() <= NORMALIZATION_TOLERANCE, "belief sums to {total}, not 1");
    NORMALIZATION_CHECKS.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error("common observation has zero probability under the prior (t = {time})")]
    Inconsistent { time: usize },
    #[error("filter needs an observation kernel that does not depend on the previous action")]
    ActionDependentObservation,
    #[error("factored filter needs a model with per-agent kernels")]
    NotFactored,
    #[error("expected {expected} entries, found {found}")]
    Size { expected: usize, found: usize },
    #[error("probability vector sums to {0}")]
    NotNormalized(f64),
    #[error("negative or non-finite probability {value} at index {index}")]
    Negative { index: usize, value: f64 },
}

/// How broadcast decisions are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BroadcastMode {
    /// Every agent broadcasts every step.
    Always,
    /// Agents broadcast according to their options' broadcast policies.
    Intermittent,
}

/// Whether silence carries evidence in the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SilenceMode {
    /// Silent agents are weighted by their silence probability.
    Informative,
    /// Silent agents contribute a constant likelihood.
    Uninformative,
}

/// One slot per agent: the broadcast observation component, or `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommonObservation {
    pub slots: Vec<Option<usize>>,
}

impl CommonObservation {
    pub fn new(slots: Vec<Option<usize>>) -> Self {
        Self { slots }
    }

    pub fn silent(agents: usize) -> Self {
        Self { slots: vec![None; agents] }
    }

    /// Keeps the components of `observation` whose broadcast bit is set.
    pub fn assemble(observation: &[usize], broadcast: &[bool]) -> Self {
        Self { slots: observation.iter().zip(broadcast).map(|(&o, &b)| if b { Some(o) } else { None }).collect() }
    }

    pub fn broadcasters(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Dense distribution over joint states.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonBelief {
    probs: Vec<f64>,
    time: usize,
}

impl CommonBelief {
    /// Wraps an already normalized probability vector.
    pub fn from_probs(probs: Vec<f64>, time: usize) -> Result<Self, BeliefError> {
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(BeliefError::Negative { index, value });
        }
        let total = compensated_sum(&probs);
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(BeliefError::NotNormalized(total));
        }
        assert_normalized(&probs);
        Ok(Self { probs, time })
    }

    /// Normalizes nonnegative weights; `None` if their total is zero.
    pub fn from_weights(mut weights: Vec<f64>, time: usize) -> Option<Self> {
        let total = compensated_sum(&weights);
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        assert_normalized(&weights);
        Some(Self { probs: weights, time })
    }

    pub fn dirac(states: usize, s: usize, time: usize) -> Self {
        let mut probs = vec![0.0; states];
        probs[s] = 1.0;
        assert_normalized(&probs);
        Self { probs, time }
    }

    pub fn uniform(states: usize, time: usize) -> Self {
        Self::from_weights(vec![1.0; states], time).expect("nonempty state space")
    }

    pub fn initial(model: &DecPomdpModel) -> Self {
        Self::from_weights(model.initial().to_vec(), 0).expect("initial distribution has mass")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn get(&self, s: usize) -> f64 {
        self.probs[s]
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().copied().enumerate().filter(|e| e.1 > 0.0)
    }

    /// The support point if the belief is a point mass.
    pub fn as_dirac(&self) -> Option<usize> {
        let mut it = self.support();
        match (it.next(), it.next()) {
            (Some((s, p)), None) if p == 1.0 => Some(s),
            _ => None,
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        sample::categorical(rng, &self.probs)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        crate::math::max_abs_diff(&self.probs, &other.probs)
    }

    /// Marginal of agent `j`'s local component.
    pub fn marginal(&self, model: &DecPomdpModel, j: usize) -> Vec<f64> {
        let states = model.states();
        let mut m = vec![0.0; states.agent_size(j)];
        for (s, p) in self.support() {
            m[states.local(s, j)] += p;
        }
        m
    }
}

/// Product of per-agent marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredBelief {
    marginals: Vec<Vec<f64>>,
    time: usize,
}

impl FactoredBelief {
    pub fn from_marginals(marginals: Vec<Vec<f64>>, time: usize) -> Result<Self, BeliefError> {
        for m in &marginals {
            if let Some((index, &value)) = m.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(BeliefError::Negative { index, value });
            }
            let total = compensated_sum(m);
            if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(BeliefError::NotNormalized(total));
            }
            assert_normalized(m);
        }
        Ok(Self { marginals, time })
    }

    /// Marginals of the model's initial distribution.
    pub fn initial(model: &DecPomdpModel) -> Self {
        let b = CommonBelief::initial(model);
        let marginals = (0..model.num_agents()).map(|j| b.marginal(model, j)).collect();
        Self::from_marginals(marginals, 0).expect("marginals of a normalized belief")
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    pub fn marginal(&self, j: usize) -> &[f64] {
        &self.marginals[j]
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// Independent per-agent draws, encoded as a joint state.
    pub fn sample<R: RngCore + ?Sized>(&self, model: &DecPomdpModel, rng: &mut R) -> usize {
        let locals: Vec<usize> = self.marginals.iter().map(|m| sample::categorical(rng, m)).collect();
        model.states().encode(0, &locals)
    }

    /// The dense product distribution.
    pub fn to_joint(&self, model: &DecPomdpModel) -> CommonBelief {
        let states = model.states();
        let mut probs = vec![0.0; states.size()];
        for (s, p) in probs.iter_mut().enumerate() {
            *p = (0..self.marginals.len()).map(|j| self.marginals[j][states.local(s, j)]).product();
        }
        CommonBelief::from_weights(probs, self.time).expect("product of distributions has mass")
    }
}

/// Filter over a model, an option pool and a broadcast regime.
#[derive(Debug, Clone, Copy)]
pub struct Filter<'a> {
    model: &'a DecPomdpModel,
    pool: &'a OptionPool,
    mode: BroadcastMode,
    silence: SilenceMode,
}

impl<'a> Filter<'a> {
    pub fn new(model: &'a DecPomdpModel, pool: &'a OptionPool, mode: BroadcastMode) -> Result<Self, BeliefError> {
        if model.observation_depends_on_action() {
            return Err(BeliefError::ActionDependentObservation);
        }
        Ok(Self { model, pool, mode, silence: SilenceMode::Informative })
    }

    pub fn with_silence(mut self, silence: SilenceMode) -> Self {
        self.silence = silence;
        self
    }

    pub fn model(&self) -> &'a DecPomdpModel {
        self.model
    }

    pub fn pool(&self) -> &'a OptionPool {
        self.pool
    }

    pub fn mode(&self) -> BroadcastMode {
        self.mode
    }

    /// `π^b(br^j = 1 | s^j)` under the broadcast regime.
    pub fn broadcast_prob(&self, s: usize, omega: usize, j: usize) -> f64 {
        match self.mode {
            BroadcastMode::Always => 1.0,
            BroadcastMode::Intermittent => self.pool.broadcast_prob(s, omega, j),
        }
    }

    /// `P(õ | s, ω)`: observation likelihood of the present slots times the
    /// broadcast-decision probabilities. With `silence_weight` false the
    /// factors for silent agents are dropped.
    fn state_likelihood(&self, s: usize, omega: usize, obs: &CommonObservation, silence_weight: bool) -> f64 {
        let observations = self.model.observations();
        let mut lik = 1.0;
        for (j, slot) in obs.slots.iter().enumerate() {
            let pb = self.broadcast_prob(s, omega, j);
            lik *= match slot {
                Some(_) => pb,
                None if silence_weight => 1.0 - pb,
                None => 1.0,
            };
            if lik == 0.0 {
                return 0.0;
            }
        }
        if obs.broadcasters() == 0 {
            return lik;
        }
        let emission: f64 = self
            .model
            .observation_row(s, 0)
            .iter()
            .filter(|&&(o, _)| {
                obs.slots.iter().enumerate().all(|(j, slot)| slot.is_none_or(|x| observations.component(o, j) == x))
            })
            .map(|e| e.1)
            .sum();
        lik * emission
    }

    /// `P(õ | b, ω) = Σ_s b(s) P(õ | s, ω)`.
    pub fn likelihood(&self, b: &CommonBelief, omega: usize, obs: &CommonObservation) -> f64 {
        b.support().map(|(s, p)| p * self.state_likelihood(s, omega, obs, true)).sum()
    }

    /// Conditions `b` on the common observation.
    pub fn posterior(&self, b: &CommonBelief, obs: &CommonObservation, omega: usize) -> Result<CommonBelief, BeliefError> {
        assert_eq!(obs.slots.len(), self.model.num_agents(), "one slot per agent");
        let silence_weight = self.silence == SilenceMode::Informative;
        let mut w = vec![0.0; b.len()];
        for (s, p) in b.support() {
            w[s] = p * self.state_likelihood(s, omega, obs, silence_weight);
        }
        CommonBelief::from_weights(w, b.time()).ok_or(BeliefError::Inconsistent { time: b.time() })
    }

    /// `b'(s') = Σ_s Σ_a π^ω(a|s) p^a(s,s') b(s)`.
    pub fn predict(&self, b: &CommonBelief, omega: usize) -> CommonBelief {
        let mut next = vec![0.0; b.len()];
        let mut actions = Vec::new();
        for (s, p) in b.support() {
            self.pool.joint_action_probs(s, omega, &mut actions);
            for &(a, pa) in &actions {
                for &(s2, q) in self.model.transition_row(s, a) {
                    next[s2] += p * pa * q;
                }
            }
        }
        CommonBelief::from_weights(next, b.time() + 1).expect("transition rows carry mass")
    }

    /// `predict(posterior(b, õ, ω), ω)`.
    pub fn step(&self, b: &CommonBelief, obs: &CommonObservation, omega: usize) -> Result<CommonBelief, BeliefError> {
        Ok(self.predict(&self.posterior(b, obs, omega)?, omega))
    }

    /// Every common observation with positive probability under `(b, ω)`,
    /// with its probability, in increasing slot order.
    pub fn branches(&self, b: &CommonBelief, omega: usize) -> Vec<(CommonObservation, f64)> {
        let n = self.model.num_agents();
        let observations = self.model.observations();
        let mut acc: BTreeMap<CommonObservation, f64> = BTreeMap::new();
        let mut pb = vec![0.0; n];
        for (s, p) in b.support() {
            for (j, slot) in pb.iter_mut().enumerate() {
                *slot = self.broadcast_prob(s, omega, j);
            }
            for mask in 0u64..(1u64 << n) {
                let mut pm = p;
                for (j, &q) in pb.iter().enumerate() {
                    pm *= if mask >> j & 1 == 1 { q } else { 1.0 - q };
                }
                if pm == 0.0 {
                    continue;
                }
                if mask == 0 {
                    *acc.entry(CommonObservation::silent(n)).or_insert(0.0) += pm;
                    continue;
                }
                for &(o, po) in self.model.observation_row(s, 0) {
                    if po == 0.0 {
                        continue;
                    }
                    let slots =
                        (0..n).map(|j| if mask >> j & 1 == 1 { Some(observations.component(o, j)) } else { None }).collect();
                    *acc.entry(CommonObservation::new(slots)).or_insert(0.0) += pm * po;
                }
            }
        }
        acc.into_iter().collect()
    }

    /// Per-agent posterior and prediction on a factored model.
    pub fn factored_update(
        &self,
        fb: &FactoredBelief,
        obs: &CommonObservation,
        omega: usize,
    ) -> Result<FactoredBelief, BeliefError> {
        let kernels = self.model.factored().ok_or(BeliefError::NotFactored)?;
        let silence_weight = self.silence == SilenceMode::Informative;
        let mut out = Vec::with_capacity(fb.marginals.len());
        for (j, marginal) in fb.marginals.iter().enumerate() {
            let option = self.pool.agent_option(omega, j);
            let actions = option.actions();
            let mut post = vec![0.0; marginal.len()];
            for (sj, &p) in marginal.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let pb = match self.mode {
                    BroadcastMode::Always => 1.0,
                    BroadcastMode::Intermittent => option.broadcast_prob(sj),
                };
                let lik = match obs.slots[j] {
                    Some(x) => pb * kernels.observations[j].row(sj).iter().filter(|e| e.0 == x).map(|e| e.1).sum::<f64>(),
                    None if silence_weight => 1.0 - pb,
                    None => 1.0,
                };
                post[sj] = p * lik;
            }
            let total = compensated_sum(&post);
            if !(total > 0.0) {
                return Err(BeliefError::Inconsistent { time: fb.time });
            }
            let mut next = vec![0.0; marginal.len()];
            let mut probs = vec![0.0; actions];
            for (sj, &p) in post.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let p = p / total;
                option.action_probs_into(sj, &mut probs);
                for (a, &pa) in probs.iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    for &(s2, q) in kernels.transitions[j].row(sj * actions + a) {
                        next[s2] += p * pa * q;
                    }
                }
            }
            let total = compensated_sum(&next);
            for v in next.iter_mut() {
                *v /= total;
            }
            assert_normalized(&next);
            out.push(next);
        }
        Ok(FactoredBelief { marginals: out, time: fb.time + 1 })
    }
}

/// Approximate per-agent dynamics for environments whose joint model is too
/// large to filter exactly. The shared state component is observed by every
/// agent, so only local components are uncertain.
pub trait LocalDynamics {
    /// Support of agent `j`'s local state at reset.
    fn initial_marginal(&self, j: usize) -> Vec<f64>;
    /// `p(s'^j | shared, s^j, a^j)` as sparse pairs.
    fn local_transition(&self, j: usize, shared: usize, local: usize, action: usize, out: &mut Vec<(usize, f64)>);
}

/// Per-agent marginals next to an observed shared component. Broadcast slots
/// carry the agent's local state.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBelief {
    shared: usize,
    marginals: Vec<Vec<f64>>,
    time: usize,
}

impl LocalBelief {
    pub fn initial(dynamics: &dyn LocalDynamics, agents: usize, shared: usize) -> Self {
        let marginals: Vec<Vec<f64>> = (0..agents).map(|j| dynamics.initial_marginal(j)).collect();
        for m in &marginals {
            assert_normalized(m);
        }
        Self { shared, marginals, time: 0 }
    }

    pub fn shared(&self) -> usize {
        self.shared
    }

    pub fn marginal(&self, j: usize) -> &[f64] {
        &self.marginals[j]
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn sample<R: RngCore + ?Sized>(&self, pool: &OptionPool, rng: &mut R) -> usize {
        let locals: Vec<usize> = self.marginals.iter().map(|m| sample::categorical(rng, m)).collect();
        pool.states().encode(self.shared, &locals)
    }

    /// Predicts every marginal under `omega`, moves to the observed shared
    /// component `shared_next`, then conditions on `obs`.
    pub fn advance(
        &mut self,
        dynamics: &dyn LocalDynamics,
        pool: &OptionPool,
        mode: BroadcastMode,
        silence: SilenceMode,
        omega: usize,
        shared_next: usize,
        obs: &CommonObservation,
    ) -> Result<(), BeliefError> {
        let states = pool.states();
        let mut row = Vec::new();
        for (j, marginal) in self.marginals.iter_mut().enumerate() {
            let option = pool.agent_option(omega, j);
            let n = states.agent_size(j);
            let mut probs = vec![0.0; option.actions()];
            let mut next = vec![0.0; n];
            for (sj, &p) in marginal.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                option.action_probs_into(self.shared * n + sj, &mut probs);
                for (a, &pa) in probs.iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    dynamics.local_transition(j, self.shared, sj, a, &mut row);
                    for &(s2, q) in &row {
                        next[s2] += p * pa * q;
                    }
                }
            }
            for (sj, w) in next.iter_mut().enumerate() {
                let pb = match mode {
                    BroadcastMode::Always => 1.0,
                    BroadcastMode::Intermittent => option.broadcast_prob(shared_next * n + sj),
                };
                *w *= match obs.slots[j] {
                    Some(x) if x == sj => pb,
                    Some(_) => 0.0,
                    None if silence == SilenceMode::Informative => 1.0 - pb,
                    None => 1.0,
                };
            }
            let total = compensated_sum(&next);
            if !(total > 0.0) {
                return Err(BeliefError::Inconsistent { time: self.time + 1 });
            }
            for w in next.iter_mut() {
                *w /= total;
            }
            assert_normalized(&next);
            *marginal = next;
        }
        self.shared = shared_next;
        self.time += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentParts;
    use crate::option::MarkovOption;
    use crate::sample::stream_rng;
    use crate::space::{ProductSpace, StateSpace};

    fn agent(states: usize, transition: Vec<Vec<(usize, f64)>>, observation: Vec<Vec<(usize, f64)>>, obs: usize) -> AgentParts {
        AgentParts {
            states,
            actions: 1,
            observations: obs,
            transition,
            observation,
            reward: vec![0.0; states * states],
            initial: vec![1.0 / states as f64; states],
        }
    }

    fn identity_agent(states: usize) -> AgentParts {
        agent(states, (0..states).map(|s| vec![(s, 1.0)]).collect(), (0..states).map(|s| vec![(s, 1.0)]).collect(), states)
    }

    fn pool_with_broadcast(model: &DecPomdpModel, probs: &[Vec<f64>]) -> OptionPool {
        let options = (0..model.num_agents())
            .map(|j| {
                let mut o = MarkovOption::new(0, model.states().agent_size(j), 1);
                for (input, &p) in probs[j].iter().enumerate() {
                    *o.epsilon_mut(input) = crate::option::logit(p);
                }
                vec![o]
            })
            .collect();
        OptionPool::new(model.states().clone(), model.actions().clone(), options)
    }

    #[test]
    fn all_broadcast_gives_dirac() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(2), identity_agent(3)], 0.0, 0.9, 1.0).unwrap();
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let f = Filter::new(&m, &pool, BroadcastMode::Always).unwrap();
        let b = CommonBelief::initial(&m);
        let post = f.posterior(&b, &CommonObservation::new(vec![Some(1), Some(2)]), 0).unwrap();
        assert_eq!(post.as_dirac(), Some(m.states().encode(0, &[1, 2])));
    }

    #[test]
    fn uninformative_silence_keeps_prior() {
        let mut a = identity_agent(2);
        a.observation = vec![vec![(0, 0.5), (1, 0.5)]; 2];
        let m = DecPomdpModel::from_factored(vec![a.clone(), a], 0.0, 0.9, 1.0).unwrap();
        let pool = pool_with_broadcast(&m, &[vec![0.3, 0.3], vec![0.3, 0.3]]);
        let f = Filter::new(&m, &pool, BroadcastMode::Intermittent).unwrap();
        let b = CommonBelief::from_probs(vec![0.1, 0.2, 0.3, 0.4], 0).unwrap();
        let post = f.posterior(&b, &CommonObservation::silent(2), 0).unwrap();
        assert!(post.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn one_broadcaster_bayes_by_hand() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(2), identity_agent(2)], 0.0, 0.9, 1.0).unwrap();
        let silence2 = [0.8, 0.4];
        let pool = pool_with_broadcast(&m, &[vec![0.6, 0.9], vec![1.0 - silence2[0], 1.0 - silence2[1]]]);
        let f = Filter::new(&m, &pool, BroadcastMode::Intermittent).unwrap();
        let b = CommonBelief::uniform(4, 0);
        let post = f.posterior(&b, &CommonObservation::new(vec![Some(1), None]), 0).unwrap();
        // Hand oracle: only states with agent-1 component 1 survive; agent
        // 2's marginal is the uniform prior reweighted by its silence odds.
        let z = silence2[0] + silence2[1];
        let expected = [0.0, 0.0, silence2[0] / z, silence2[1] / z];
        for s in 0..4 {
            assert!((post.get(s) - expected[s]).abs() < 1e-12, "{s}: {}", post.get(s));
        }
    }

    #[test]
    fn broadcast_probability_example() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(2)], 0.0, 0.9, 1.0).unwrap();
        let pool = pool_with_broadcast(&m, &[vec![0.5, 0.2]]);
        let f = Filter::new(&m, &pool, BroadcastMode::Intermittent).unwrap();
        let b = CommonBelief::from_probs(vec![0.3, 0.7], 0).unwrap();
        let silent = f.likelihood(&b, 0, &CommonObservation::silent(1));
        assert!((1.0 - silent - 0.29).abs() < 1e-12);
        let total: f64 = f.branches(&b, 0).iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn always_broadcast_likelihood_is_point_mass() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(3)], 0.0, 0.9, 1.0).unwrap();
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let f = Filter::new(&m, &pool, BroadcastMode::Always).unwrap();
        let b = CommonBelief::dirac(3, 2, 0);
        let br = f.branches(&b, 0);
        assert_eq!(br, vec![(CommonObservation::new(vec![Some(2)]), 1.0)]);
        let never = pool_with_broadcast(&m, &[vec![0.0; 3]]);
        let f = Filter::new(&m, &never, BroadcastMode::Intermittent).unwrap();
        assert_eq!(f.branches(&b, 0), vec![(CommonObservation::silent(1), 1.0)]);
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(2)], 0.0, 0.9, 1.0).unwrap();
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let f = Filter::new(&m, &pool, BroadcastMode::Always).unwrap();
        let b = CommonBelief::dirac(2, 0, 3);
        let err = f.posterior(&b, &CommonObservation::new(vec![Some(1)]), 0).unwrap_err();
        assert_eq!(err, BeliefError::Inconsistent { time: 3 });
    }

    #[test]
    fn predict_examples() {
        // Dirac through a deterministic map.
        let a = agent(3, vec![vec![(2, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)]], (0..3).map(|s| vec![(s, 1.0)]).collect(), 3);
        let m = DecPomdpModel::from_factored(vec![a], 0.0, 0.9, 1.0).unwrap();
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let f = Filter::new(&m, &pool, BroadcastMode::Always).unwrap();
        assert_eq!(f.predict(&CommonBelief::dirac(3, 0, 0), 0).as_dirac(), Some(2));
        // Uniform is stationary under a permutation.
        let u = f.predict(&CommonBelief::uniform(3, 0), 0);
        assert!(u.probs().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn predict_matches_matrix_product() {
        let rows = [
            vec![vec![(0, 0.2), (1, 0.5), (2, 0.3)], vec![(1, 1.0)], vec![(0, 0.6), (2, 0.4)]],
            vec![vec![(2, 1.0)], vec![(0, 0.1), (1, 0.9)], vec![(0, 0.5), (1, 0.25), (2, 0.25)]],
        ];
        let mut a = identity_agent(3);
        a.actions = 2;
        a.transition = (0..6).map(|r| rows[r % 2][r / 2].clone()).collect();
        a.reward = vec![0.0; 18];
        let m = DecPomdpModel::from_factored(vec![a], 0.0, 0.9, 1.0).unwrap();
        let mut o = MarkovOption::new(0, 3, 2);
        o.theta_mut(0).copy_from_slice(&[0.3, -0.2]);
        o.theta_mut(2).copy_from_slice(&[-1.0, 0.4]);
        let pool = OptionPool::new(m.states().clone(), m.actions().clone(), vec![vec![o.clone()]]);
        let f = Filter::new(&m, &pool, BroadcastMode::Always).unwrap();
        let b = CommonBelief::from_probs(vec![0.5, 0.25, 0.25], 0).unwrap();
        let got = f.predict(&b, 0);
        // Dense oracle: P[s][s'] = Σ_a π(a|s) T_a[s][s'], then b P.
        let mut dense = [[0.0f64; 3]; 3];
        for s in 0..3 {
            let pi = o.action_probs(s);
            for act in 0..2 {
                for &(s2, p) in &rows[act][s] {
                    dense[s][s2] += pi[act] * p;
                }
            }
        }
        for s2 in 0..3 {
            let want: f64 = (0..3).map(|s| b.get(s) * dense[s][s2]).sum();
            assert!((got.get(s2) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn factored_filter_all_broadcast_is_dirac() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(3), identity_agent(2)], 0.0, 0.9, 1.0).unwrap();
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let f = Filter::new(&m, &pool, BroadcastMode::Always).unwrap();
        let fb = FactoredBelief::initial(&m);
        let next = f.factored_update(&fb, &CommonObservation::new(vec![Some(2), Some(0)]), 0).unwrap();
        assert_eq!(next.marginal(0), &[0.0, 0.0, 1.0]);
        assert_eq!(next.marginal(1), &[1.0, 0.0]);
    }

    #[test]
    fn factored_filter_silent_identity_is_unchanged() {
        let mut a = identity_agent(2);
        a.observation = vec![vec![(0, 0.5), (1, 0.5)]; 2];
        let m = DecPomdpModel::from_factored(vec![a.clone(), a], 0.0, 0.9, 1.0).unwrap();
        let pool = pool_with_broadcast(&m, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let f = Filter::new(&m, &pool, BroadcastMode::Intermittent).unwrap();
        let fb = FactoredBelief::initial(&m);
        let next = f.factored_update(&fb, &CommonObservation::silent(2), 0).unwrap();
        assert_eq!(next.marginals(), fb.marginals());
    }

    #[test]
    fn factored_filter_refuses_joint_models() {
        let m = DecPomdpModel::from_factored(vec![identity_agent(2)], 0.0, 0.9, 1.0).unwrap();
        let joint = DecPomdpModel::new(crate::model::ModelParts {
            states: StateSpace::new(vec![2]),
            actions: ProductSpace::new(vec![1]),
            observations: ProductSpace::new(vec![2]),
            transition: m.transition_matrix().clone(),
            observation: m.observation_kernel().clone(),
            reward: m.reward_model().clone(),
            broadcast_penalty: 0.0,
            discount: 0.9,
            initial: m.initial().to_vec(),
            reward_bound: 1.0,
            factored: None,
        })
        .unwrap();
        let pool = OptionPool::uniform(joint.states().clone(), joint.actions().clone(), 1);
        let f = Filter::new(&joint, &pool, BroadcastMode::Always).unwrap();
        let err = f.factored_update(&FactoredBelief::initial(&m), &CommonObservation::silent(1), 0);
        assert_eq!(err.unwrap_err(), BeliefError::NotFactored);
    }

    #[test]
    fn sampling_frequencies() {
        let b = CommonBelief::uniform(4, 0);
        let mut rng = stream_rng(3, 0);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[b.sample(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
        let d = CommonBelief::dirac(4, 3, 0);
        assert!((0..100).all(|_| d.sample(&mut rng) == 3));
    }
}

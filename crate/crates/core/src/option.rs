//! Parameterized Markov options and joint option pools.
//!
//! Each option of agent `j` is indexed by the agent's *policy input*: its
//! local state combined with the shared state component (see
//! [`StateSpace::policy_input`]). The action policy is a softmax over
//! `theta[input][action]`, the broadcast policy is `sigmoid(epsilon[input])`
//! and termination is `sigmoid(phi[input])` clamped to `[BETA_MIN, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::space::{ProductSpace, StateSpace};

/// Lower clamp for termination probabilities.
pub const BETA_MIN: f64 = 1e-6;

/// Logit large enough that the logistic saturates to exactly 0 or 1.
pub const SATURATED_LOGIT: f64 = 800.0;

/// Inverse logistic, saturating at the ends of `[0, 1]`.
pub fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        -SATURATED_LOGIT
    } else if p >= 1.0 {
        SATURATED_LOGIT
    } else {
        math::ln(p / (1.0 - p))
    }
}

/// `Π_j (1 - β_j)`.
pub fn beta_none_of(betas: &[f64]) -> f64 {
    betas.iter().map(|b| 1.0 - b).product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovOption {
    id: usize,
    inputs: usize,
    actions: usize,
    initiation: Option<Vec<bool>>,
    theta: Vec<f64>,
    epsilon: Vec<f64>,
    phi: Vec<f64>,
}

impl MarkovOption {
    /// Option with all parameters at zero: uniform actions, broadcast and
    /// termination probability 0.5 everywhere.
    pub fn new(id: usize, inputs: usize, actions: usize) -> Self {
        assert!(inputs > 0 && actions > 0, "option needs inputs and actions");
        Self {
            id,
            inputs,
            actions,
            initiation: None,
            theta: vec![0.0; inputs * actions],
            epsilon: vec![0.0; inputs],
            phi: vec![0.0; inputs],
        }
    }

    /// Option that picks `choices[input]` with probability one, terminates
    /// with `beta` and broadcasts with `broadcast` in every input.
    pub fn deterministic(id: usize, actions: usize, choices: &[usize], beta: f64, broadcast: f64) -> Self {
        let mut o = Self::new(id, choices.len(), actions);
        for (input, &c) in choices.iter().enumerate() {
            let row = o.theta_mut(input);
            row.fill(-SATURATED_LOGIT);
            row[c] = 0.0;
        }
        o.epsilon.fill(logit(broadcast));
        o.phi.fill(logit(beta));
        o
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn with_initiation(mut self, set: Vec<bool>) -> Self {
        assert_eq!(set.len(), self.inputs);
        self.initiation = Some(set);
        self
    }

    pub fn initiation(&self) -> Option<&[bool]> {
        self.initiation.as_deref()
    }

    pub fn can_initiate(&self, input: usize) -> bool {
        self.initiation.as_ref().is_none_or(|s| s[input])
    }

    pub fn theta(&self, input: usize) -> &[f64] {
        &self.theta[input * self.actions..(input + 1) * self.actions]
    }

    pub fn theta_mut(&mut self, input: usize) -> &mut [f64] {
        &mut self.theta[input * self.actions..(input + 1) * self.actions]
    }

    pub fn epsilon(&self, input: usize) -> f64 {
        self.epsilon[input]
    }

    pub fn epsilon_mut(&mut self, input: usize) -> &mut f64 {
        &mut self.epsilon[input]
    }

    pub fn phi(&self, input: usize) -> f64 {
        self.phi[input]
    }

    pub fn phi_mut(&mut self, input: usize) -> &mut f64 {
        &mut self.phi[input]
    }

    /// All parameters as `(theta, epsilon, phi)` slices.
    pub fn params(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.theta, &self.epsilon, &self.phi)
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (&mut self.theta, &mut self.epsilon, &mut self.phi)
    }

    pub fn action_probs_into(&self, input: usize, out: &mut [f64]) {
        math::softmax_into(self.theta(input), 1.0, out);
    }

    pub fn action_probs(&self, input: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.actions];
        self.action_probs_into(input, &mut out);
        out
    }

    pub fn action_prob(&self, input: usize, action: usize) -> f64 {
        self.action_probs(input)[action]
    }

    /// `π^b(br = 1 | input)`.
    pub fn broadcast_prob(&self, input: usize) -> f64 {
        math::sigmoid(self.epsilon[input])
    }

    /// `β(input)`, clamped to `[BETA_MIN, 1]`.
    pub fn termination(&self, input: usize) -> f64 {
        math::sigmoid(self.phi[input]).max(BETA_MIN)
    }

    /// `∂ log π(action | input) / ∂ theta[input][·]`.
    pub fn action_score_into(&self, input: usize, action: usize, out: &mut [f64]) {
        self.action_probs_into(input, out);
        for (k, g) in out.iter_mut().enumerate() {
            *g = if k == action { 1.0 } else { 0.0 } - *g;
        }
    }

    /// `∂ log π^b(br | input) / ∂ epsilon[input]`.
    pub fn broadcast_score(&self, input: usize, broadcast: bool) -> f64 {
        let p = self.broadcast_prob(input);
        if broadcast {
            1.0 - p
        } else {
            -p
        }
    }

    /// `∂ β(input) / ∂ phi[input]`; zero where the clamp is active.
    pub fn termination_grad(&self, input: usize) -> f64 {
        let s = math::sigmoid(self.phi[input]);
        if s < BETA_MIN {
            0.0
        } else {
            s * (1.0 - s)
        }
    }

    /// Gradient of the action-policy entropy with respect to `theta[input][·]`.
    pub fn action_entropy_grad_into(&self, input: usize, out: &mut [f64]) {
        self.action_probs_into(input, out);
        let h: f64 = -out.iter().filter(|&&p| p > 0.0).map(|&p| p * math::ln(p)).sum::<f64>();
        for g in out.iter_mut() {
            *g = if *g > 0.0 { -*g * (math::ln(*g) + h) } else { 0.0 };
        }
    }

    /// Gradient of the broadcast-policy entropy with respect to `epsilon[input]`.
    pub fn broadcast_entropy_grad(&self, input: usize) -> f64 {
        let p = self.broadcast_prob(input);
        if p <= 0.0 || p >= 1.0 {
            0.0
        } else {
            -p * (1.0 - p) * self.epsilon[input]
        }
    }
}

/// Joint option: one option id per agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointOption {
    pub ids: Vec<usize>,
}

impl JointOption {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }
}

/// Option pools `Ω^j` of every agent over a fixed state and action space.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionPool {
    states: StateSpace,
    actions: ProductSpace,
    options: Vec<Vec<MarkovOption>>,
    joint: ProductSpace,
}

impl OptionPool {
    pub fn new(states: StateSpace, actions: ProductSpace, options: Vec<Vec<MarkovOption>>) -> Self {
        let j = states.num_agents();
        assert_eq!(options.len(), j, "one pool per agent");
        assert_eq!(actions.len(), j, "one action set per agent");
        for (k, pool) in options.iter().enumerate() {
            assert!(!pool.is_empty(), "agent {k} has an empty option pool");
            for (id, o) in pool.iter().enumerate() {
                assert_eq!(o.id(), id, "option ids must be pool positions");
                assert_eq!(o.inputs(), states.policy_inputs(k), "agent {k} option {id} input count");
                assert_eq!(o.actions(), actions.dim(k), "agent {k} option {id} action count");
            }
        }
        let joint = ProductSpace::new(options.iter().map(Vec::len).collect());
        Self { states, actions, options, joint }
    }

    /// `count` zero-initialized options per agent.
    pub fn uniform(states: StateSpace, actions: ProductSpace, count: usize) -> Self {
        let options = (0..states.num_agents())
            .map(|j| (0..count).map(|id| MarkovOption::new(id, states.policy_inputs(j), actions.dim(j))).collect())
            .collect();
        Self::new(states, actions, options)
    }

    /// One option per primitive action: always picks it, terminates after
    /// one step and always broadcasts. Joint option indices coincide with
    /// joint action indices.
    pub fn primitive(states: StateSpace, actions: ProductSpace) -> Self {
        let options = (0..states.num_agents())
            .map(|j| {
                let choices = |b: usize| vec![b; states.policy_inputs(j)];
                (0..actions.dim(j)).map(|b| MarkovOption::deterministic(b, actions.dim(j), &choices(b), 1.0, 1.0)).collect()
            })
            .collect();
        Self::new(states, actions, options)
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn actions(&self) -> &ProductSpace {
        &self.actions
    }

    pub fn num_agents(&self) -> usize {
        self.options.len()
    }

    pub fn pool_size(&self, j: usize) -> usize {
        self.options[j].len()
    }

    pub fn joint_space(&self) -> &ProductSpace {
        &self.joint
    }

    pub fn num_joint(&self) -> usize {
        self.joint.size()
    }

    pub fn option(&self, j: usize, id: usize) -> &MarkovOption {
        &self.options[j][id]
    }

    pub fn option_mut(&mut self, j: usize, id: usize) -> &mut MarkovOption {
        &mut self.options[j][id]
    }

    pub fn agent_options(&self, j: usize) -> &[MarkovOption] {
        &self.options[j]
    }

    pub fn encode(&self, omega: &JointOption) -> usize {
        self.joint.encode(&omega.ids)
    }

    pub fn decode(&self, index: usize) -> JointOption {
        JointOption::new(self.joint.decode(index))
    }

    /// Component `j` of joint option `omega`.
    pub fn component(&self, omega: usize, j: usize) -> usize {
        self.joint.component(omega, j)
    }

    /// Option of agent `j` inside joint option `omega`.
    pub fn agent_option(&self, omega: usize, j: usize) -> &MarkovOption {
        &self.options[j][self.joint.component(omega, j)]
    }

    pub fn termination(&self, s: usize, omega: usize, j: usize) -> f64 {
        self.agent_option(omega, j).termination(self.states.policy_input(s, j))
    }

    pub fn broadcast_prob(&self, s: usize, omega: usize, j: usize) -> f64 {
        self.agent_option(omega, j).broadcast_prob(self.states.policy_input(s, j))
    }

    /// `β_none(s, ω) = Π_j (1 - β^{ω^j}(s^j))`.
    pub fn beta_none(&self, s: usize, omega: usize) -> f64 {
        (0..self.num_agents()).map(|j| 1.0 - self.termination(s, omega, j)).product()
    }

    /// Joint intra-option policy `π^ω(· | s)` as sparse `(a, p)` pairs with
    /// zero-probability actions dropped.
    pub fn joint_action_probs(&self, s: usize, omega: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.push((0, 1.0));
        let mut scratch = Vec::new();
        let mut probs = Vec::new();
        for j in 0..self.num_agents() {
            let o = self.agent_option(omega, j);
            probs.resize(o.actions(), 0.0);
            o.action_probs_into(self.states.policy_input(s, j), &mut probs);
            scratch.clear();
            let stride = self.actions.stride(j);
            for &(idx, p) in out.iter() {
                for (a, &q) in probs.iter().enumerate() {
                    if q > 0.0 {
                        scratch.push((idx + a * stride, p * q));
                    }
                }
            }
            core::mem::swap(out, &mut scratch);
        }
        out.sort_by_key(|e| e.0);
    }

    /// `π^ω(a | s)` for a joint action.
    pub fn joint_action_prob(&self, s: usize, omega: usize, a: usize) -> f64 {
        (0..self.num_agents())
            .map(|j| {
                let o = self.agent_option(omega, j);
                o.action_prob(self.states.policy_input(s, j), self.actions.component(a, j))
            })
            .product()
    }

    /// Candidate ids agent `j` may hold at `s` when reselecting from `current`:
    /// every option whose initiation set contains `s`, plus `current`.
    fn candidates(&self, s: usize, j: usize, current: Option<usize>) -> Vec<usize> {
        let input = self.states.policy_input(s, j);
        let mut c: Vec<usize> =
            (0..self.pool_size(j)).filter(|&id| self.options[j][id].can_initiate(input) || Some(id) == current).collect();
        if c.is_empty() {
            c = (0..self.pool_size(j)).collect();
        }
        c
    }

    /// Joint options in `Ω(T)` at `s`: agents with `reselect[j]` range over
    /// their candidates, the others keep their component of `omega`.
    /// Yielded in increasing joint index, i.e. lexicographically by ids.
    pub fn reselections(&self, s: usize, omega: usize, reselect: &[bool]) -> Vec<usize> {
        let lists: Vec<Vec<usize>> = (0..self.num_agents())
            .map(|j| if reselect[j] { self.candidates(s, j, None) } else { vec![self.component(omega, j)] })
            .collect();
        self.product_indices(&lists)
    }

    /// Union over nonempty `T` of `Ω(T)` at `s`.
    pub fn all_reselections(&self, s: usize, omega: usize) -> Vec<usize> {
        let lists: Vec<Vec<usize>> =
            (0..self.num_agents()).map(|j| self.candidates(s, j, Some(self.component(omega, j)))).collect();
        self.product_indices(&lists)
    }

    /// Joint options each agent may initiate at `s`.
    pub fn initiable(&self, s: usize) -> Vec<usize> {
        let lists: Vec<Vec<usize>> = (0..self.num_agents()).map(|j| self.candidates(s, j, None)).collect();
        self.product_indices(&lists)
    }

    pub fn has_initiation_sets(&self) -> bool {
        self.options.iter().flatten().any(|o| o.initiation.is_some())
    }

    fn product_indices(&self, lists: &[Vec<usize>]) -> Vec<usize> {
        let mut out = vec![0usize];
        for (j, list) in lists.iter().enumerate() {
            let stride = self.joint.stride(j);
            out = out.iter().flat_map(|&base| list.iter().map(move |&id| base + id * stride)).collect();
        }
        out
    }
}

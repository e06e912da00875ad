//! Option models, option-level Bellman backups and belief-space value
//! iteration.
//!
//! State tables are dense `n_states × n_joint_options` row-major vectors:
//! entry `s * n_joint + ω`. Belief tables use the same layout over the
//! indices of a [`BeliefSpace`].

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use thiserror::Error;

use crate::belief::{BeliefError, BroadcastMode, CommonBelief, CommonObservation, Filter};
use crate::math;
use crate::model::DecPomdpModel;
use crate::option::OptionPool;
use crate::sample;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("agent {agent} option {option} terminates with probability {beta} < {beta_min} at input {input}")]
    NonTerminating { agent: usize, option: usize, input: usize, beta: f64, beta_min: f64 },
    #[error("belief set exceeds {limit} beliefs ({count} found)")]
    TooManyBeliefs { count: usize, limit: usize },
    #[error("belief {index} has a successor outside the set (option {option}, observation {observation:?})")]
    NotClosed { index: usize, option: usize, observation: CommonObservation },
    #[error("belief is not in the enumerated set (nearest member {nearest} at distance {distance})")]
    UnknownBelief { nearest: usize, distance: f64 },
    #[error("option pool and model disagree on agents, states or actions")]
    Mismatch,
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

/// `β_none·Q(s,ω) + (1-β_none)·best`.
pub fn u_from_parts(beta_none: f64, q_current: f64, best_reselection: f64) -> f64 {
    beta_none * q_current + (1.0 - beta_none) * best_reselection
}

/// Largest `Q(s, ω')` over reselections of any nonempty subset of agents.
/// `q_row` holds `Q(s, ·)` over all joint options.
pub fn best_reselection(pool: &OptionPool, s: usize, omega: usize, q_row: &[f64]) -> f64 {
    if pool.has_initiation_sets() {
        pool.all_reselections(s, omega).into_iter().map(|w| q_row[w]).fold(f64::NEG_INFINITY, f64::max)
    } else {
        q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Option value upon arrival `U(s, ω)`.
pub fn u_value(pool: &OptionPool, s: usize, omega: usize, q_row: &[f64]) -> f64 {
    let bn = pool.beta_none(s, omega);
    if bn == 1.0 {
        return q_row[omega];
    }
    u_from_parts(bn, q_row[omega], best_reselection(pool, s, omega, q_row))
}

/// Discounted option model of one joint option.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionModel {
    /// Expected discounted reward accumulated until the option terminates.
    pub reward: Vec<f64>,
    /// Dense `n × n` discounted termination-state kernel; row mass is
    /// `E[γ^duration]`.
    pub kernel: Vec<f64>,
    pub iterations: usize,
}

impl OptionModel {
    pub fn row(&self, s: usize) -> &[f64] {
        let n = self.reward.len();
        &self.kernel[s * n..(s + 1) * n]
    }
}

/// One-step quantities of a model under an option pool.
#[derive(Debug, Clone)]
pub struct Planner<'a> {
    model: &'a DecPomdpModel,
    pool: &'a OptionPool,
    mode: BroadcastMode,
    n_states: usize,
    n_joint: usize,
    /// `r(s, ω)`: expected immediate reward including the broadcast penalty.
    reward: Vec<f64>,
    /// `d(· | s, ω)`: one-step successor distribution.
    successors: Vec<Vec<(usize, f64)>>,
    beta_none: Vec<f64>,
}

impl<'a> Planner<'a> {
    pub fn new(model: &'a DecPomdpModel, pool: &'a OptionPool, mode: BroadcastMode) -> Result<Self, PlannerError> {
        if pool.states() != model.states() || pool.actions() != model.actions() {
            return Err(PlannerError::Mismatch);
        }
        let n_states = model.num_states();
        let n_joint = pool.num_joint();
        let mut reward = vec![0.0; n_states * n_joint];
        let mut successors = Vec::with_capacity(n_states * n_joint);
        let mut beta_none = vec![0.0; n_states * n_joint];
        let mut actions = Vec::new();
        let mut dense = vec![0.0; n_states];
        let mut touched = Vec::new();
        for s in 0..n_states {
            for w in 0..n_joint {
                pool.joint_action_probs(s, w, &mut actions);
                let mut r = 0.0;
                for &(a, pa) in &actions {
                    r += pa * model.expected_reward(s, a);
                    for &(s2, p) in model.transition_row(s, a) {
                        if dense[s2] == 0.0 {
                            touched.push(s2);
                        }
                        dense[s2] += pa * p;
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let row: Vec<(usize, f64)> =
                    touched.iter().map(|&s2| (s2, core::mem::take(&mut dense[s2]))).filter(|e| e.1 > 0.0).collect();
                touched.clear();
                // Talkers are counted at the arrival state.
                let talkers: f64 = match mode {
                    BroadcastMode::Always => model.num_agents() as f64,
                    BroadcastMode::Intermittent => row
                        .iter()
                        .map(|&(s2, d)| d * (0..model.num_agents()).map(|j| pool.broadcast_prob(s2, w, j)).sum::<f64>())
                        .sum(),
                };
                reward[s * n_joint + w] = r + model.broadcast_penalty() * talkers;
                successors.push(row);
                beta_none[s * n_joint + w] = pool.beta_none(s, w);
            }
        }
        Ok(Self { model, pool, mode, n_states, n_joint, reward, successors, beta_none })
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

    pub fn num_states(&self) -> usize {
        self.n_states
    }

    pub fn num_joint(&self) -> usize {
        self.n_joint
    }

    pub fn table_len(&self) -> usize {
        self.n_states * self.n_joint
    }

    pub fn filter(&self) -> Result<Filter<'a>, PlannerError> {
        Ok(Filter::new(self.model, self.pool, self.mode)?)
    }

    /// `r(s, ω)`.
    pub fn reward(&self, s: usize, omega: usize) -> f64 {
        self.reward[s * self.n_joint + omega]
    }

    /// `d(· | s, ω)`.
    pub fn successors(&self, s: usize, omega: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_joint + omega]
    }

    pub fn beta_none(&self, s: usize, omega: usize) -> f64 {
        self.beta_none[s * self.n_joint + omega]
    }

    /// Refuses pools with a termination probability below `beta_min`.
    pub fn check_termination(&self, beta_min: f64) -> Result<(), PlannerError> {
        for j in 0..self.pool.num_agents() {
            for o in self.pool.agent_options(j) {
                for input in 0..o.inputs() {
                    let beta = o.termination(input);
                    if beta < beta_min {
                        return Err(PlannerError::NonTerminating { agent: j, option: o.id(), input, beta, beta_min });
                    }
                }
            }
        }
        Ok(())
    }

    /// Reward and discounted termination kernel of joint option `omega`,
    /// by fixed-point iteration until the sup-norm change is `<= tol`.
    pub fn option_model(&self, omega: usize, beta_min: f64, tol: f64) -> Result<OptionModel, PlannerError> {
        self.check_termination(beta_min)?;
        let n = self.n_states;
        let gamma = self.model.discount();
        let mut reward = vec![0.0; n];
        let mut kernel = vec![0.0; n * n];
        let mut next_r = vec![0.0; n];
        let mut next_k = vec![0.0; n * n];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let mut residual: f64 = 0.0;
            for s in 0..n {
                let mut r = self.reward(s, omega);
                let row = &mut next_k[s * n..(s + 1) * n];
                row.fill(0.0);
                for &(s2, d) in self.successors(s, omega) {
                    let bn = self.beta_none(s2, omega);
                    r += gamma * d * bn * reward[s2];
                    row[s2] += gamma * d * (1.0 - bn);
                    if bn > 0.0 {
                        for (t, &k) in kernel[s2 * n..(s2 + 1) * n].iter().enumerate() {
                            row[t] += gamma * d * bn * k;
                        }
                    }
                }
                residual = residual.max((r - reward[s]).abs());
                next_r[s] = r;
            }
            residual = residual.max(math::max_abs_diff(&next_k, &kernel));
            core::mem::swap(&mut reward, &mut next_r);
            core::mem::swap(&mut kernel, &mut next_k);
            if residual <= tol {
                break;
            }
        }
        Ok(OptionModel { reward, kernel, iterations })
    }

    /// `U(s, ω)` from a state table.
    pub fn u(&self, q: &[f64], s: usize, omega: usize) -> f64 {
        let row = &q[s * self.n_joint..(s + 1) * self.n_joint];
        let bn = self.beta_none(s, omega);
        if bn == 1.0 {
            return row[omega];
        }
        u_from_parts(bn, row[omega], best_reselection(self.pool, s, omega, row))
    }

    /// Full `U` table.
    pub fn u_table(&self, q: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; q.len()];
        for s in 0..self.n_states {
            for w in 0..self.n_joint {
                u[s * self.n_joint + w] = self.u(q, s, w);
            }
        }
        u
    }

    /// One synchronous sweep of `Q(s,ω) = r(s,ω) + γ Σ d(s'|s,ω) U(s',ω)`.
    /// Returns the new table and the sup-norm change.
    pub fn backup_state(&self, q: &[f64]) -> (Vec<f64>, f64) {
        let u = self.u_table(q);
        let gamma = self.model.discount();
        let mut out = vec![0.0; q.len()];
        let mut residual: f64 = 0.0;
        for s in 0..self.n_states {
            for w in 0..self.n_joint {
                let i = s * self.n_joint + w;
                let ev: f64 = self.successors(s, w).iter().map(|&(s2, d)| d * u[s2 * self.n_joint + w]).sum();
                out[i] = self.reward[i] + gamma * ev;
                residual = residual.max((out[i] - q[i]).abs());
            }
        }
        (out, residual)
    }

    /// Same backup with a fixed reselection distribution `mu[s][ω']` in
    /// place of the max.
    pub fn backup_state_fixed(&self, q: &[f64], mu: &[f64]) -> Vec<f64> {
        let nj = self.n_joint;
        let gamma = self.model.discount();
        let mut out = vec![0.0; q.len()];
        for s in 0..self.n_states {
            for w in 0..nj {
                let ev: f64 = self
                    .successors(s, w)
                    .iter()
                    .map(|&(s2, d)| {
                        let row = &q[s2 * nj..(s2 + 1) * nj];
                        let follow: f64 = row.iter().zip(&mu[s2 * nj..(s2 + 1) * nj]).map(|(x, m)| x * m).sum();
                        d * u_from_parts(self.beta_none(s2, w), row[w], follow)
                    })
                    .sum();
                out[s * nj + w] = self.reward(s, w) + gamma * ev;
            }
        }
        out
    }

    /// Iterates the state backup from zero until the change is `<= tol`.
    pub fn solve_state(&self, tol: f64, max_iterations: usize) -> StateSolution {
        let mut q = vec![0.0; self.table_len()];
        let mut residuals = Vec::new();
        for _ in 0..max_iterations {
            let (next, r) = self.backup_state(&q);
            q = next;
            residuals.push(r);
            if r <= tol {
                break;
            }
        }
        let u = self.u_table(&q);
        StateSolution { q, u, residuals }
    }

    /// `r(b, ω) = Σ_s b(s) r(s, ω)`.
    pub fn belief_reward(&self, b: &CommonBelief, omega: usize) -> f64 {
        b.support().map(|(s, p)| p * self.reward(s, omega)).sum()
    }

    /// `Σ_s b(s) β_none(s, ω)`.
    pub fn belief_beta_none(&self, b: &CommonBelief, omega: usize) -> f64 {
        b.support().map(|(s, p)| p * self.beta_none(s, omega)).sum()
    }

    /// `Q(b,ω) = r(b,ω) + γ Σ_õ P(õ|b,ω) Σ_{s'} b'_õ(s') U(s',ω)` with
    /// `b'_õ = predict(posterior(b, õ, ω), ω)`, evaluated on state table `q`.
    /// Refuses beliefs that are not members of `space`.
    pub fn belief_backup(&self, space: &BeliefSpace, b: &CommonBelief, omega: usize, q: &[f64]) -> Result<f64, PlannerError> {
        space.require(b)?;
        let filter = self.filter()?;
        let gamma = self.model.discount();
        let mut ev = 0.0;
        for (obs, p) in filter.branches(b, omega) {
            let next = filter.step(b, &obs, omega)?;
            let u: f64 = next.support().map(|(s2, pb)| pb * self.u(q, s2, omega)).sum();
            ev += p * u;
        }
        Ok(self.belief_reward(b, omega) + gamma * ev)
    }

    /// Breadth-first closure of filter successors from `b0` across every
    /// joint option and common observation.
    pub fn enumerate_beliefs(&self, b0: CommonBelief, depth_cap: usize, max_beliefs: usize) -> Result<BeliefSpace, PlannerError> {
        let filter = self.filter()?;
        let mut space = BeliefSpace {
            beliefs: vec![b0],
            successors: Vec::new(),
            closed: false,
            depth: 0,
            n_joint: self.n_joint,
            projected: false,
        };
        let mut frontier = vec![0usize];
        let mut depth = 0;
        while !frontier.is_empty() && depth < depth_cap {
            let mut next_frontier = Vec::new();
            for &i in &frontier {
                debug_assert_eq!(space.successors.len(), i);
                let mut rows = Vec::with_capacity(self.n_joint);
                for w in 0..self.n_joint {
                    let b = space.beliefs[i].clone();
                    let mut row = Vec::new();
                    for (obs, p) in filter.branches(&b, w) {
                        let next = normalize_time(filter.step(&b, &obs, w)?);
                        let k = match space.find(&next) {
                            Some(k) => k,
                            None => {
                                space.beliefs.push(next);
                                if space.beliefs.len() > max_beliefs {
                                    return Err(PlannerError::TooManyBeliefs { count: space.beliefs.len(), limit: max_beliefs });
                                }
                                next_frontier.push(space.beliefs.len() - 1);
                                space.beliefs.len() - 1
                            }
                        };
                        row.push(Branch { observation: obs, probability: p, next: k });
                    }
                    rows.push(row);
                }
                space.successors.push(rows);
            }
            frontier = next_frontier;
            depth += 1;
        }
        space.closed = frontier.is_empty();
        space.depth = depth;
        Ok(space)
    }

    /// Completes an unclosed space by mapping every successor outside the
    /// set to its nearest member in L1 distance.
    pub fn project_unclosed(&self, space: &mut BeliefSpace) -> Result<(), PlannerError> {
        if space.closed {
            return Ok(());
        }
        let filter = self.filter()?;
        let known = space.beliefs.len();
        while space.successors.len() < known {
            let i = space.successors.len();
            let mut rows = Vec::with_capacity(self.n_joint);
            for w in 0..self.n_joint {
                let b = space.beliefs[i].clone();
                let mut row = Vec::new();
                for (obs, p) in filter.branches(&b, w) {
                    let next = filter.step(&b, &obs, w)?;
                    let k = space.nearest(&next).0;
                    row.push(Branch { observation: obs, probability: p, next: k });
                }
                rows.push(row);
            }
            space.successors.push(rows);
        }
        space.closed = true;
        space.projected = true;
        Ok(())
    }

    /// Iterates `V(b) = max_ω [r(b,ω) + γ Σ_õ P(õ|b,ω) V(b'_õ)]` over a
    /// closed belief space until the sup-norm change is `<= tol`.
    pub fn value_iteration(&self, space: &BeliefSpace, tol: f64, max_iterations: usize) -> Result<BeliefSolution, PlannerError> {
        space.check_closed()?;
        let nb = space.len();
        let nj = self.n_joint;
        let gamma = self.model.discount();
        let rewards: Vec<f64> =
            (0..nb).flat_map(|i| (0..nj).map(move |w| (i, w))).map(|(i, w)| self.belief_reward(&space.beliefs[i], w)).collect();
        let mut v = vec![0.0; nb];
        let mut q = vec![0.0; nb * nj];
        let mut residuals = Vec::new();
        for _ in 0..max_iterations {
            for i in 0..nb {
                for w in 0..nj {
                    let ev: f64 = space.successors[i][w].iter().map(|br| br.probability * v[br.next]).sum();
                    q[i * nj + w] = rewards[i * nj + w] + gamma * ev;
                }
            }
            let mut residual: f64 = 0.0;
            let mut next = vec![0.0; nb];
            for i in 0..nb {
                next[i] = q[i * nj..(i + 1) * nj].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                residual = residual.max((next[i] - v[i]).abs());
            }
            v = next;
            residuals.push(residual);
            if residual <= tol {
                break;
            }
        }
        let policy = (0..nb).map(|i| math::argmax(&q[i * nj..(i + 1) * nj])).collect();
        Ok(BeliefSolution { v, q, policy, residuals })
    }

    /// Belief-table operator with arrival value `β̄(b')Q(b',ω) +
    /// (1-β̄(b'))·follow(b')`, where `follow` is the max over `ω'` or, with
    /// `mu`, the `mu`-weighted average.
    pub fn backup_belief_table(&self, space: &BeliefSpace, q: &[f64], mu: Option<&[f64]>) -> Result<Vec<f64>, PlannerError> {
        space.check_closed()?;
        let nj = self.n_joint;
        let gamma = self.model.discount();
        let mut out = vec![0.0; q.len()];
        for i in 0..space.len() {
            for w in 0..nj {
                let b = &space.beliefs[i];
                let mut ev = 0.0;
                for br in &space.successors[i][w] {
                    let k = br.next;
                    let row = &q[k * nj..(k + 1) * nj];
                    let follow = match mu {
                        Some(mu) => row.iter().zip(&mu[k * nj..(k + 1) * nj]).map(|(x, m)| x * m).sum(),
                        None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    };
                    let bn = self.belief_beta_none(&space.beliefs[k], w);
                    ev += br.probability * u_from_parts(bn, row[w], follow);
                }
                out[i * nj + w] = self.belief_reward(b, w) + gamma * ev;
            }
        }
        Ok(out)
    }

    /// Largest observed `‖BQ₁ − BQ₂‖∞ / ‖Q₁ − Q₂‖∞` over random table pairs,
    /// for the fixed-reselection and max operators on state tables and, if
    /// `space` is given, on belief tables.
    pub fn contraction_certificate<R: RngCore + ?Sized>(
        &self,
        space: Option<&BeliefSpace>,
        trials: usize,
        rng: &mut R,
    ) -> Result<ContractionReport, PlannerError> {
        let nj = self.n_joint;
        let mut report = ContractionReport::default();
        let random_table =
            |rng: &mut R, len: usize| -> Vec<f64> { (0..len).map(|_| 20.0 * sample::uniform(rng) - 10.0).collect() };
        let random_mu = |rng: &mut R, rows: usize| -> Vec<f64> {
            let mut mu = random_table(rng, rows * nj);
            for row in mu.chunks_mut(nj) {
                for x in row.iter_mut() {
                    *x = x.abs() + 1e-3;
                }
                let t: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= t);
            }
            mu
        };
        for _ in 0..trials {
            let mu = random_mu(rng, self.n_states);
            let q1 = random_table(rng, self.table_len());
            let q2 = random_table(rng, self.table_len());
            report.state_fixed = report.state_fixed.max(lipschitz_ratio(&q1, &q2, |q| self.backup_state_fixed(q, &mu)));
            report.state_max = report.state_max.max(lipschitz_ratio(&q1, &q2, |q| self.backup_state(q).0));
            if let Some(space) = space {
                let len = space.len() * nj;
                let mu = random_mu(rng, space.len());
                let q1 = random_table(rng, len);
                let q2 = random_table(rng, len);
                let f = self.backup_belief_table(space, &q1, Some(&mu))?;
                let g = self.backup_belief_table(space, &q2, Some(&mu))?;
                report.belief_fixed = report.belief_fixed.max(ratio(&f, &g, &q1, &q2));
                let f = self.backup_belief_table(space, &q1, None)?;
                let g = self.backup_belief_table(space, &q2, None)?;
                report.belief_max = report.belief_max.max(ratio(&f, &g, &q1, &q2));
            }
            report.trials += 1;
        }
        Ok(report)
    }
}

fn normalize_time(b: CommonBelief) -> CommonBelief {
    CommonBelief::from_probs(b.probs().to_vec(), 0).unwrap_or(b)
}

/// `‖F(q1) − F(q2)‖∞ / ‖q1 − q2‖∞`, defined as 0 when `q1 == q2`.
pub fn lipschitz_ratio<F: Fn(&[f64]) -> Vec<f64>>(q1: &[f64], q2: &[f64], f: F) -> f64 {
    ratio(&f(q1), &f(q2), q1, q2)
}

fn ratio(f1: &[f64], f2: &[f64], q1: &[f64], q2: &[f64]) -> f64 {
    let den = math::max_abs_diff(q1, q2);
    if den == 0.0 {
        0.0
    } else {
        math::max_abs_diff(f1, f2) / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContractionReport {
    pub trials: usize,
    pub state_fixed: f64,
    pub state_max: f64,
    pub belief_fixed: f64,
    pub belief_max: f64,
}

impl ContractionReport {
    pub fn max_ratio(&self) -> f64 {
        self.state_fixed.max(self.state_max).max(self.belief_fixed).max(self.belief_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSolution {
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSolution {
    pub v: Vec<f64>,
    /// `Q(b, ω)` at the last sweep, row-major over beliefs.
    pub q: Vec<f64>,
    /// Greedy joint option per belief; ties go to the smallest index.
    pub policy: Vec<usize>,
    pub residuals: Vec<f64>,
}

/// One common-observation branch out of a belief.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub observation: CommonObservation,
    pub probability: f64,
    pub next: usize,
}

/// Enumerated belief set with its successor structure.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSpace {
    beliefs: Vec<CommonBelief>,
    /// `successors[i][ω]`; only present for expanded beliefs.
    successors: Vec<Vec<Vec<Branch>>>,
    closed: bool,
    depth: usize,
    n_joint: usize,
    projected: bool,
}

/// Beliefs closer than this in every entry are the same belief.
pub const BELIEF_DEDUP_TOLERANCE: f64 = 1e-9;

impl BeliefSpace {
    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn beliefs(&self) -> &[CommonBelief] {
        &self.beliefs
    }

    pub fn belief(&self, i: usize) -> &CommonBelief {
        &self.beliefs[i]
    }

    pub fn branches(&self, i: usize, omega: usize) -> &[Branch] {
        &self.successors[i][omega]
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// True when unclosed successors were mapped to nearest members.
    pub fn is_projected(&self) -> bool {
        self.projected
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn find(&self, b: &CommonBelief) -> Option<usize> {
        self.beliefs.iter().position(|x| x.max_abs_diff(b) <= BELIEF_DEDUP_TOLERANCE)
    }

    fn nearest(&self, b: &CommonBelief) -> (usize, f64) {
        self.beliefs
            .iter()
            .enumerate()
            .map(|(i, x)| (i, math::l1_distance(x.probs(), b.probs())))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
    }

    fn require(&self, b: &CommonBelief) -> Result<usize, PlannerError> {
        self.find(b).ok_or_else(|| {
            let (nearest, distance) = self.nearest(b);
            PlannerError::UnknownBelief { nearest, distance }
        })
    }

    fn check_closed(&self) -> Result<(), PlannerError> {
        if self.closed {
            return Ok(());
        }
        // The first unexpanded belief is a successor that escaped the cap.
        let index = self.successors.len();
        for (i, rows) in self.successors.iter().enumerate() {
            for (w, row) in rows.iter().enumerate() {
                if let Some(br) = row.iter().find(|br| br.next >= index) {
                    return Err(PlannerError::NotClosed { index: i, option: w, observation: br.observation.clone() });
                }
            }
        }
        Err(PlannerError::NotClosed { index, option: 0, observation: CommonObservation::silent(0) })
    }

    pub fn num_joint(&self) -> usize {
        self.n_joint
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentParts;
    use crate::option::MarkovOption;
    use crate::sample::stream_rng;

    fn one_state(reward: f64, beta: f64, gamma: f64) -> (DecPomdpModel, OptionPool) {
        let a = AgentParts {
            states: 1,
            actions: 1,
            observations: 1,
            transition: vec![vec![(0, 1.0)]],
            observation: vec![vec![(0, 1.0)]],
            reward: vec![reward],
            initial: vec![1.0],
        };
        let m = DecPomdpModel::from_factored(vec![a], 0.0, gamma, 1.0).unwrap();
        let o = MarkovOption::deterministic(0, 1, &[0], beta, 1.0);
        let pool = OptionPool::new(m.states().clone(), m.actions().clone(), vec![vec![o]]);
        (m, pool)
    }

    #[test]
    fn u_value_examples() {
        assert_eq!(u_from_parts(1.0, 4.0, 9.0), 4.0);
        assert_eq!(u_from_parts(0.0, 4.0, 9.0), 9.0);
        assert_eq!(u_from_parts(0.5, 1.0, 3.0), 2.0);
    }

    #[test]
    fn scalar_option_reward() {
        // r = 1 + γ(1-β) r with γ = β = 0.5 gives r = 1 / (1 - 0.25) = 4/3.
        let (m, pool) = one_state(1.0, 0.5, 0.5);
        let p = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        let om = p.option_model(0, 1e-6, 1e-12).unwrap();
        assert!((om.reward[0] - 4.0 / 3.0).abs() < 1e-10);
        // E[γ^duration]: duration k with probability 0.5^k, so Σ 0.25^k = 1/3.
        assert!((om.row(0)[0] - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn one_step_options_reduce_to_actions() {
        let (m, pool) = one_state(0.7, 1.0, 0.9);
        let p = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        let om = p.option_model(0, 1e-6, 1e-12).unwrap();
        assert_eq!(om.reward[0], 0.7);
        assert!((om.row(0)[0] - 0.9).abs() < 1e-15);
        assert_eq!(om.iterations, 2);
    }

    #[test]
    fn refuses_slow_termination() {
        let (m, pool) = one_state(1.0, 0.01, 0.5);
        let p = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        assert!(matches!(p.option_model(0, 0.05, 1e-10), Err(PlannerError::NonTerminating { .. })));
    }

    #[test]
    fn single_belief_geometric_value() {
        // r = 1 per step, always reselected: V = 1 / (1 - 0.5).
        let (m, pool) = one_state(1.0, 1.0, 0.5);
        let p = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        let space = p.enumerate_beliefs(CommonBelief::initial(&m), 10, 10).unwrap();
        assert_eq!(space.len(), 1);
        assert!(space.is_closed());
        let sol = p.value_iteration(&space, 1e-13, 1000).unwrap();
        assert!((sol.v[0] - 2.0).abs() < 1e-12);
        assert_eq!(sol.policy, vec![0]);
    }

    #[test]
    fn zero_reward_fixed_point_is_immediate() {
        let (m, pool) = one_state(0.0, 0.5, 0.9);
        let p = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        let sol = p.solve_state(1e-12, 100);
        assert_eq!(sol.residuals, vec![0.0]);
        assert_eq!(sol.q, vec![0.0]);
    }

    #[test]
    fn equal_tables_have_zero_ratio() {
        assert_eq!(lipschitz_ratio(&[1.0, 2.0], &[1.0, 2.0], |q| q.to_vec()), 0.0);
    }

    #[test]
    fn contraction_on_one_state() {
        let (m, pool) = one_state(0.3, 0.4, 0.9);
        let p = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        let space = p.enumerate_beliefs(CommonBelief::initial(&m), 5, 10).unwrap();
        let mut rng = stream_rng(5, 0);
        let r = p.contraction_certificate(Some(&space), 20, &mut rng).unwrap();
        assert!(r.max_ratio() <= 0.9 + 1e-9);
        assert_eq!(r.trials, 20);
    }
}

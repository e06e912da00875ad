//! Monte-Carlo policy evaluation by direct simulation of a tabular model.

use teamopt_core::belief::{BroadcastMode, CommonObservation};
use teamopt_core::sample::{self, SimRng};
use teamopt_core::{DecPomdpModel, OptionPool};

/// What a coordinator sees before choosing the joint option for step `t`.
#[derive(Debug, Clone)]
pub struct Prescription<'a> {
    pub t: usize,
    /// Broadcast observation received on arrival; `None` at `t = 0`.
    pub common: Option<&'a CommonObservation>,
    /// Joint option of the previous step; `None` at `t = 0`.
    pub previous: Option<usize>,
    /// Which agents' options terminated on arrival (all true at `t = 0`).
    pub terminated: &'a [bool],
}

/// Chooses joint options from common information only.
pub trait Coordinator {
    fn reset(&mut self);
    fn prescribe(&mut self, p: &Prescription<'_>) -> usize;
}

/// Keeps the current option per agent until it terminates, then asks
/// `choose` for a replacement.
pub struct CallAndReturn<F> {
    pub choose: F,
}

/// Every step the same fixed joint option.
pub struct Fixed(pub usize);

impl Coordinator for Fixed {
    fn reset(&mut self) {}

    fn prescribe(&mut self, _: &Prescription<'_>) -> usize {
        self.0
    }
}

impl<F: FnMut(&Prescription<'_>) -> usize> Coordinator for CallAndReturn<F> {
    fn reset(&mut self) {}

    fn prescribe(&mut self, p: &Prescription<'_>) -> usize {
        match p.previous {
            Some(w) if p.terminated.iter().all(|&t| !t) => w,
            _ => (self.choose)(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub episodes: usize,
}

/// Simulates `episodes` runs of `horizon` steps and returns the mean
/// discounted return (rewards include the broadcast penalty) and its
/// standard error. Episodes stop early on states flagged in `terminal`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_evaluate(
    model: &DecPomdpModel,
    pool: &OptionPool,
    mode: BroadcastMode,
    coordinator: &mut dyn Coordinator,
    episodes: usize,
    horizon: usize,
    terminal: Option<&[bool]>,
    rng: &mut SimRng,
) -> OracleEstimate {
    let agents = model.num_agents();
    let gamma = model.discount();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut parts = vec![0usize; agents];
    let mut probs = Vec::new();
    let mut broadcast = vec![true; agents];
    let mut terminated = vec![true; agents];
    for _ in 0..episodes {
        coordinator.reset();
        let mut s = model.sample_initial(rng);
        let mut g = 0.0;
        let mut discount = 1.0;
        let mut previous = None;
        let mut common: Option<CommonObservation> = None;
        terminated.fill(true);
        for t in 0..horizon {
            let w = coordinator.prescribe(&Prescription { t, common: common.as_ref(), previous, terminated: &terminated });
            for (j, part) in parts.iter_mut().enumerate() {
                let o = pool.agent_option(w, j);
                probs.resize(o.actions(), 0.0);
                o.action_probs_into(model.states().policy_input(s, j), &mut probs);
                *part = sample::categorical(rng, &probs);
            }
            let a = model.actions().encode(&parts);
            let s2 = model.sample_transition(s, a, rng);
            let o = model.observations().decode(model.sample_observation(s2, a, rng));
            if mode == BroadcastMode::Intermittent {
                for (j, b) in broadcast.iter_mut().enumerate() {
                    *b = sample::bernoulli(rng, pool.broadcast_prob(s2, w, j));
                }
            }
            g += discount * model.joint_reward(s, a, s2, &broadcast);
            discount *= gamma;
            for (j, t) in terminated.iter_mut().enumerate() {
                *t = sample::bernoulli(rng, pool.termination(s2, w, j));
            }
            common = Some(CommonObservation::assemble(&o, &broadcast));
            previous = Some(w);
            s = s2;
            if terminal.is_some_and(|f| f[s]) {
                break;
            }
        }
        sum += g;
        sum_sq += g * g;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = if episodes > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    OracleEstimate { mean, stderr: (var / n).sqrt(), episodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use teamopt_core::model::{ModelParts, ObservationKernel, RewardModel, SparseMatrix};
    use teamopt_core::sample::stream_rng;
    use teamopt_core::{ProductSpace, StateSpace};

    fn chain(reward: f64) -> DecPomdpModel {
        // 0 -> 1 -> 2 -> 2, reward `reward` on every step.
        let transition = SparseMatrix::from_rows([[(1, 1.0)], [(2, 1.0)], [(2, 1.0)]]);
        DecPomdpModel::new(ModelParts {
            states: StateSpace::new(vec![3]),
            actions: ProductSpace::new(vec![1]),
            observations: ProductSpace::new(vec![3]),
            transition,
            observation: ObservationKernel::StateOnly(SparseMatrix::from_rows((0..3).map(|s| [(s, 1.0)]))),
            reward: RewardModel::Joint(vec![reward; 3]),
            broadcast_penalty: 0.0,
            discount: 0.5,
            initial: vec![1.0, 0.0, 0.0],
            reward_bound: reward.abs(),
            factored: None,
        })
        .unwrap()
    }

    #[test]
    fn two_step_chain() {
        let m = chain(1.0);
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let mut rng = stream_rng(0, 0);
        let e = oracle_evaluate(&m, &pool, BroadcastMode::Always, &mut Fixed(0), 100, 2, None, &mut rng);
        assert_eq!(e.mean, 1.5);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn zero_reward() {
        let m = chain(0.0);
        let pool = OptionPool::uniform(m.states().clone(), m.actions().clone(), 1);
        let mut rng = stream_rng(0, 0);
        let e = oracle_evaluate(&m, &pool, BroadcastMode::Always, &mut Fixed(0), 50, 20, None, &mut rng);
        assert_eq!((e.mean, e.stderr), (0.0, 0.0));
    }
}

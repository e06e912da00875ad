use proptest::prelude::*;

use teamopt_core::belief::{normalization_checks, BroadcastMode, CommonBelief, CommonObservation, FactoredBelief, Filter};
use teamopt_core::generate::{random_factored, random_model, random_pool, RandomModel};
use teamopt_core::learner::{coe_update, termination_advantage, CoeStep, CriticTables};
use teamopt_core::planner::Planner;
use teamopt_core::sample::{self, stream_rng, SimRng};
use teamopt_core::teamgrid::{self, export_tabular, make_env, EnvParams, GridIndex, GridSpec, NUM_ACTIONS};
use teamopt_core::{DecPomdpModel, OptionPool};

fn small_model(seed: u64, agents: usize, penalty: f64) -> DecPomdpModel {
    let mut rng = stream_rng(seed, 0);
    let mut spec = RandomModel::new(vec![2; agents], vec![2; agents], 0.9);
    spec.broadcast_penalty = penalty;
    random_model(&mut rng, &spec)
}

fn pool_for(model: &DecPomdpModel, seed: u64, count: usize) -> OptionPool {
    let mut rng = stream_rng(seed, 1);
    random_pool(&mut rng, model.states(), model.actions(), count, 2.0)
}

fn emit(
    model: &DecPomdpModel,
    pool: &OptionPool,
    mode: BroadcastMode,
    s: usize,
    w: usize,
    rng: &mut SimRng,
) -> CommonObservation {
    let o = model.observations().decode(model.sample_observation(s, 0, rng));
    let br: Vec<bool> = (0..model.num_agents())
        .map(|j| mode == BroadcastMode::Always || sample::bernoulli(rng, pool.broadcast_prob(s, w, j)))
        .collect();
    CommonObservation::assemble(&o, &br)
}

fn advance(model: &DecPomdpModel, pool: &OptionPool, s: usize, w: usize, rng: &mut SimRng) -> usize {
    let parts: Vec<usize> = (0..model.num_agents())
        .map(|j| sample::categorical(rng, &pool.agent_option(w, j).action_probs(model.states().policy_input(s, j))))
        .collect();
    model.sample_transition(s, model.actions().encode(&parts), rng)
}

fn switch_spec(agents: usize, slip: f64) -> GridSpec {
    let mut d = EnvParams::defaults("switch");
    d.agents = agents;
    let mut spec = make_env("switch", d).unwrap();
    spec.slip_prob = slip;
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn action_distributions_are_probability_vectors(
        logits in prop::collection::vec(-60.0f64..60.0, 1..8),
        eps in -40.0f64..40.0,
    ) {
        let mut o = teamopt_core::MarkovOption::new(0, 1, logits.len());
        o.theta_mut(0).copy_from_slice(&logits);
        *o.epsilon_mut(0) = eps;
        let p = o.action_probs(0);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let pb = o.broadcast_prob(0);
        prop_assert!((0.0..=1.0).contains(&pb));
    }

    #[test]
    fn scores_have_zero_mean(
        logits in prop::collection::vec(-20.0f64..20.0, 2..7),
        eps in -20.0f64..20.0,
    ) {
        let n = logits.len();
        let mut o = teamopt_core::MarkovOption::new(0, 1, n);
        o.theta_mut(0).copy_from_slice(&logits);
        *o.epsilon_mut(0) = eps;
        let p = o.action_probs(0);
        let mut mean = vec![0.0; n];
        let mut score = vec![0.0; n];
        for a in 0..n {
            o.action_score_into(0, a, &mut score);
            for k in 0..n {
                mean[k] += p[a] * score[k];
            }
        }
        prop_assert!(mean.iter().all(|m| m.abs() <= 1e-10));
        let pb = o.broadcast_prob(0);
        let b = pb * o.broadcast_score(0, true) + (1.0 - pb) * o.broadcast_score(0, false);
        prop_assert!(b.abs() <= 1e-10);
    }

    #[test]
    fn joint_reward_is_additive_in_broadcasts(seed in 0u64..1000, penalty in -2.0f64..0.0, mask in 0usize..8) {
        let m = small_model(seed, 3, penalty);
        let mut rng = stream_rng(seed, 7);
        let s = sample::index(&mut rng, m.num_states());
        let a = sample::index(&mut rng, m.num_actions());
        let s2 = m.sample_transition(s, a, &mut rng);
        let br: Vec<bool> = (0..3).map(|j| mask >> j & 1 == 1).collect();
        let diff = m.joint_reward(s, a, s2, &br) - m.joint_reward(s, a, s2, &[false; 3]);
        let talkers = br.iter().filter(|&&b| b).count() as f64;
        prop_assert!((diff - penalty * talkers).abs() <= 1e-12);
    }

    #[test]
    fn sampling_is_a_function_of_seed(seed in any::<u64>()) {
        let m = small_model(seed % 97, 2, 0.0);
        let run = |seed| {
            let mut rng = stream_rng(seed, 3);
            let mut s = m.sample_initial(&mut rng);
            let mut trace = vec![s];
            for t in 0..50 {
                let a = t % m.num_actions();
                s = m.sample_transition(s, a, &mut rng);
                trace.push(s);
                trace.push(m.sample_observation(s, a, &mut rng));
            }
            trace
        };
        prop_assert_eq!(run(seed), run(seed));
    }

    #[test]
    fn filter_normalizes_and_is_deterministic(seed in 0u64..500, always in any::<bool>()) {
        let m = small_model(seed, 2, -0.1);
        let pool = pool_for(&m, seed, 2);
        let mode = if always { BroadcastMode::Always } else { BroadcastMode::Intermittent };
        let filter = Filter::new(&m, &pool, mode).unwrap();
        let mut rng = stream_rng(seed, 2);
        let mut b = CommonBelief::initial(&m);
        let mut s = m.sample_initial(&mut rng);
        let before = normalization_checks();
        for t in 0..30 {
            let w = t % pool.num_joint();
            let obs = emit(&m, &pool, mode, s, w, &mut rng);
            let s2 = advance(&m, &pool, s, w, &mut rng);
            let next = filter.step(&b, &obs, w).unwrap();
            let again = filter.step(&b, &obs, w).unwrap();
            prop_assert_eq!(next.probs(), again.probs());
            prop_assert!((next.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(next.get(s2) > 0.0);
            b = next;
            s = s2;
        }
        prop_assert!(normalization_checks() > before);
    }

    #[test]
    fn branch_probabilities_sum_to_one(seed in 0u64..500) {
        let m = small_model(seed, 2, 0.0);
        let pool = pool_for(&m, seed, 2);
        let filter = Filter::new(&m, &pool, BroadcastMode::Intermittent).unwrap();
        let b = CommonBelief::initial(&m);
        for w in 0..pool.num_joint() {
            let total: f64 = filter.branches(&b, w).iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dirac_under_always_broadcast(seed in 0u64..500) {
        let mut rng = stream_rng(seed, 0);
        let mut spec = RandomModel::new(vec![3, 2], vec![2, 2], 0.9);
        spec.identity_observations = true;
        let m = random_model(&mut rng, &spec);
        let pool = pool_for(&m, seed, 2);
        let mode = BroadcastMode::Always;
        let filter = Filter::new(&m, &pool, mode).unwrap();
        let mut s = m.sample_initial(&mut rng);
        let mut b = CommonBelief::initial(&m);
        for t in 0..40 {
            let w = t % pool.num_joint();
            let obs = emit(&m, &pool, mode, s, w, &mut rng);
            prop_assert_eq!(filter.posterior(&b, &obs, w).unwrap().as_dirac(), Some(s));
            b = filter.step(&b, &obs, w).unwrap();
            s = advance(&m, &pool, s, w, &mut rng);
        }
    }

    #[test]
    fn factored_filter_matches_joint_marginals(seed in 0u64..300, always in any::<bool>()) {
        let mut rng = stream_rng(seed, 0);
        let m = random_factored(&mut rng, &[2, 3], &[2, 2], &[2, 2], 0.9);
        let pool = random_pool(&mut rng, m.states(), m.actions(), 2, 2.0);
        let mode = if always { BroadcastMode::Always } else { BroadcastMode::Intermittent };
        let filter = Filter::new(&m, &pool, mode).unwrap();
        let mut joint = CommonBelief::initial(&m);
        let mut fb = FactoredBelief::initial(&m);
        let mut s = m.sample_initial(&mut rng);
        for t in 0..20 {
            let w = t % pool.num_joint();
            let obs = emit(&m, &pool, mode, s, w, &mut rng);
            let s2 = advance(&m, &pool, s, w, &mut rng);
            joint = filter.step(&joint, &obs, w).unwrap();
            fb = filter.factored_update(&fb, &obs, w).unwrap();
            for j in 0..2 {
                let exact = joint.marginal(&m, j);
                for (x, y) in exact.iter().zip(fb.marginal(j)) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
            s = s2;
        }
    }

    #[test]
    fn termination_advantage_is_nonpositive(seed in 0u64..1000) {
        let m = small_model(seed, 2, 0.0);
        let pool = pool_for(&m, seed, 3);
        let mut critic = CriticTables::for_pool(&pool, BroadcastMode::Always);
        let mut rng = stream_rng(seed, 4);
        for q in critic.q_intra_table_mut() {
            *q = 10.0 * sample::uniform(&mut rng) - 5.0;
        }
        for s in 0..m.num_states() {
            for w in 0..pool.num_joint() {
                for j in 0..2 {
                    prop_assert!(termination_advantage(&critic, &pool, s, w, j) <= 0.0);
                }
            }
        }
    }

    #[test]
    fn planner_fixed_point_identities(seed in 0u64..200) {
        let m = small_model(seed, 2, -0.05);
        let pool = pool_for(&m, seed, 2);
        for mode in [BroadcastMode::Always, BroadcastMode::Intermittent] {
            let planner = Planner::new(&m, &pool, mode).unwrap();
            let sol = planner.solve_state(1e-12, 10_000);
            let nj = planner.num_joint();
            // Q(s,ω) = r(s,ω) + γ Σ d(s'|s,ω) U(s',ω) and U from its parts.
            let (again, residual) = planner.backup_state(&sol.q);
            prop_assert!(residual <= 1e-10);
            for (x, y) in again.iter().zip(&sol.q) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
            for s in 0..m.num_states() {
                for w in 0..nj {
                    let row = &sol.q[s * nj..(s + 1) * nj];
                    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let bn = planner.beta_none(s, w);
                    let expect = bn * row[w] + (1.0 - bn) * best;
                    prop_assert!((sol.u[s * nj + w] - expect).abs() <= 1e-12);
                }
            }
            // The stationary greedy reselection reproduces Q*.
            let mut mu = vec![0.0; sol.q.len()];
            for s in 0..m.num_states() {
                let row = &sol.q[s * nj..(s + 1) * nj];
                let k = (0..nj).fold(0, |k, i| if row[i] > row[k] { i } else { k });
                mu[s * nj + k] = 1.0;
            }
            let evaluated = planner.backup_state_fixed(&sol.q, &mu);
            for (x, y) in evaluated.iter().zip(&sol.q) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn belief_backup_is_linear_at_fixed_point(seed in 0u64..200) {
        let mut rng = stream_rng(seed, 0);
        let mut spec = RandomModel::new(vec![2, 2], vec![2, 2], 0.8);
        spec.identity_observations = true;
        let m = random_model(&mut rng, &spec);
        let pool = random_pool(&mut rng, m.states(), m.actions(), 2, 2.0);
        let planner = Planner::new(&m, &pool, BroadcastMode::Always).unwrap();
        let sol = planner.solve_state(1e-13, 10_000);
        let space = planner.enumerate_beliefs(CommonBelief::initial(&m), 3, 200).unwrap();
        let nj = planner.num_joint();
        for b in space.beliefs() {
            for w in 0..nj {
                let lhs = planner.belief_backup(&space, b, w, &sol.q).unwrap();
                let rhs: f64 = b.support().map(|(s, p)| p * sol.q[s * nj + w]).sum();
                prop_assert!((lhs - rhs).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn critic_stays_bounded() {
    let m = small_model(11, 2, -0.5);
    let pool = pool_for(&m, 11, 2);
    let mut critic = CriticTables::for_pool(&pool, BroadcastMode::Intermittent);
    let gamma = m.discount();
    let bound = (m.max_abs_reward() + 2.0 * 0.5) / (1.0 - gamma);
    let mut rng = stream_rng(11, 9);
    let (ns, nj, na) = (m.num_states(), pool.num_joint(), m.num_actions());
    for i in 0..1_000_000u32 {
        let s = sample::index(&mut rng, ns);
        let a = sample::index(&mut rng, na);
        let s2 = m.sample_transition(s, a, &mut rng);
        let mask = sample::index(&mut rng, 4);
        let br = [mask & 1 == 1, mask & 2 == 2];
        let step = CoeStep {
            state: s,
            omega: sample::index(&mut rng, nj),
            action: a,
            broadcast: mask,
            reward: m.joint_reward(s, a, s2, &br),
            next: if i % 97 == 0 { None } else { Some(s2) },
        };
        coe_update(&mut critic, &pool, &step, gamma, 0.5);
    }
    assert!(critic.q_intra_table().iter().chain(critic.q_broadcast_table()).all(|q| q.abs() <= bound));
}

#[test]
fn agents_never_share_a_cell() {
    for agents in 2..=3 {
        let spec = switch_spec(agents, 0.3);
        let mut rng = stream_rng(agents as u64, 0);
        for _ in 0..200 {
            let mut state = spec.initial_state();
            loop {
                let actions: Vec<usize> = (0..agents).map(|_| sample::index(&mut rng, NUM_ACTIONS)).collect();
                let r = teamgrid::step(&spec, &state, &actions, &mut rng).unwrap();
                let cells: Vec<(usize, usize)> = r.state.agents.iter().map(|a| (a.0, a.1)).collect();
                for i in 0..cells.len() {
                    for k in i + 1..cells.len() {
                        assert_ne!(cells[i], cells[k]);
                    }
                }
                state = r.state;
                if r.done {
                    break;
                }
            }
        }
    }
}

#[test]
fn episode_returns_are_bounded() {
    let penalty = -0.5;
    for name in ["switch", "dualswitch", "fourrooms"] {
        let p = EnvParams::defaults(name);
        let spec = make_env(name, p).unwrap();
        let j = p.agents as f64;
        let upper = p.goals as f64 * spec.goal_reward;
        let lower = spec.max_steps as f64 * (j * spec.collision_penalty + j * penalty);
        let mut rng = stream_rng(5, 0);
        for _ in 0..100 {
            let mut state = spec.initial_state();
            let mut g = 0.0;
            loop {
                let actions: Vec<usize> = (0..p.agents).map(|_| sample::index(&mut rng, NUM_ACTIONS)).collect();
                let talkers = (0..p.agents).filter(|_| sample::bernoulli(&mut rng, 0.5)).count() as f64;
                let r = teamgrid::step(&spec, &state, &actions, &mut rng).unwrap();
                g += r.reward + penalty * talkers;
                state = r.state;
                if r.done {
                    break;
                }
            }
            assert!(g <= upper + 1e-12, "{name}: {g} > {upper}");
            assert!(g >= lower - 1e-12, "{name}: {g} < {lower}");
        }
    }
}

#[test]
fn simulator_matches_exported_kernel() {
    let spec = switch_spec(2, 0.2);
    let (model, _) = export_tabular(&spec, 0.95, 0.0, 1 << 20).unwrap();
    let index = GridIndex::new(&spec);
    let mut rng = stream_rng(3, 0);
    let draws = 10_000;
    for trial in 0..6 {
        // Walk a few random steps to reach a varied start state.
        let mut state = spec.initial_state();
        for _ in 0..trial * 3 {
            let actions: Vec<usize> = (0..2).map(|_| sample::index(&mut rng, NUM_ACTIONS)).collect();
            state = teamgrid::step(&spec, &state, &actions, &mut rng).unwrap().state;
        }
        state.step = 0;
        let actions: Vec<usize> = (0..2).map(|_| sample::index(&mut rng, NUM_ACTIONS)).collect();
        let s = index.encode(&spec, &state);
        let a = model.actions().encode(&actions);
        let mut counts = vec![0.0; model.num_states()];
        for _ in 0..draws {
            let mut next = teamgrid::step(&spec, &state, &actions, &mut rng).unwrap().state;
            next.step = 0;
            counts[index.encode(&spec, &next)] += 1.0;
        }
        let mut exact = vec![0.0; model.num_states()];
        for &(s2, p) in model.transition_row(s, a) {
            exact[s2] += p;
        }
        let l1: f64 = counts.iter().zip(&exact).map(|(c, p)| (c / draws as f64 - p).abs()).sum();
        assert!(l1 <= 0.05, "trial {trial}: L1 = {l1}");
    }
}

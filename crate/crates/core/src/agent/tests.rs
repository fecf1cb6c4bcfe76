use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::evolve::EvolveConfig;
use crate::problems::{ProblemKind, ProblemSpec};
use crate::tensor::gradcheck::check_params;
use crate::tensor::{Tape, Tensor};

fn small_env_config() -> EnvConfig {
    EnvConfig {
        n_init: 8,
        fe_max: 14,
        evolve: EvolveConfig {
            pop_size: 8,
            ..EvolveConfig::default()
        },
        ..EnvConfig::default()
    }
}

fn zdt1(d: usize) -> ProblemSpec {
    ProblemSpec::new(ProblemKind::Zdt1, d, 2).unwrap()
}

fn small_agent(h: usize) -> Agent<f64> {
    Agent::new(
        AgentConfig {
            h,
            ..AgentConfig::default()
        },
        3,
    )
    .unwrap()
}

/// A short episode's transitions under random actions.
fn transitions(agent: &Agent<f64>, seed: u64) -> Vec<Transition<f64>> {
    let env = Env::new(zdt1(3), small_env_config(), seed).unwrap();
    run_episode(agent, env, ControlMode::Random, 1.0, seed, true)
        .unwrap()
        .transitions
}

#[test]
fn dueling_aggregation_hand_example() {
    let adv = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    // mean(A) = 3.5, so Q = V + A - 3.5
    assert_eq!(dueling_aggregate(1.0, &adv), vec![-1.5, -0.5, 0.5, 1.5, 2.5, 3.5]);
    assert_eq!(dueling_aggregate(0.0, &adv), vec![-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]);
}

#[test]
fn network_applies_dueling_aggregation() {
    let mut agent = small_agent(4);
    for id in [agent.q.value.w, agent.q.advantage.w] {
        agent.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    agent.params.get_mut(agent.q.value.b).data[0] = 1.0;
    agent.params.get_mut(agent.q.advantage.b).data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let ts = transitions(&agent, 1);
    let q = agent.q_values(&ts[0].s).unwrap();
    for (a, b) in q.iter().zip([-1.5, -0.5, 0.5, 1.5, 2.5, 3.5]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_states_identical_q() {
    let agent = small_agent(4);
    let ts = transitions(&agent, 2);
    let copy = OptState {
        pie: ts[0].s.pie.clone(),
        rho: ts[0].s.rho,
    };
    assert_eq!(agent.q_values(&ts[0].s).unwrap(), agent.q_values(&copy).unwrap());
    assert_eq!(agent.state_vector(&copy).unwrap().len(), 2 * 4 + 1);
}

#[test]
fn state_width_follows_ela_mode() {
    for (mode, width) in [(ElaMode::Bi, 17), (ElaMode::TrueOnly, 9), (ElaMode::SurOnly, 9)] {
        let agent = Agent::<f64>::new(
            AgentConfig {
                h: 8,
                ela_mode: mode,
                ..AgentConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(agent.state_dim(), width);
        let ts = transitions(&agent, 4);
        assert_eq!(agent.state_vector(&ts[0].s).unwrap().len(), width);
    }
}

#[test]
fn reward_cases() {
    let front = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
    assert_eq!(reward(ActionId::Resample, &[vec![-5.0, -5.0]], &front, 1.0).unwrap(), 0.0);
    assert_eq!(reward(ActionId::NdA, &[vec![3.0, 3.0]], &front, 1.0).unwrap(), -1.0);
    // a duplicate of a front point leaves the set unchanged
    assert_eq!(reward(ActionId::NdA, &[vec![2.0, 0.0]], &front, 1.0).unwrap(), -1.0);
    let r = reward(ActionId::NdA, &[vec![1.9, 0.1]], &[vec![2.0, 0.0]], 1.0).unwrap();
    assert!((r - 1.1).abs() < 1e-9, "{r}");
    assert_eq!(reward(ActionId::EpdiExplore, &[vec![1.9, 0.1]], &[vec![2.0, 0.0]], 0.0).unwrap(), 1.0);
    // closest front point at the origin: the raw distance is used
    let r = reward(ActionId::NdA, &[vec![-0.25, 0.0]], &[vec![0.0, 0.0]], 1.0).unwrap();
    assert!((r - 1.25).abs() < 1e-12);
}

#[test]
fn act_respects_epsilon_and_mask() {
    let agent = small_agent(4);
    let ts = transitions(&agent, 5);
    let s = &ts[0].s;
    let q = agent.q_values(s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let best = greedy_action(&q, ActionMask::ALL).unwrap();
    assert_eq!(agent.act(s, 0.0, ActionMask::ALL, &mut rng).unwrap(), best);
    let only = ActionMask::only(ActionId::NdA);
    for _ in 0..20 {
        assert_eq!(agent.act(s, 1.0, only, &mut rng).unwrap(), ActionId::NdA);
    }
    assert!(matches!(
        agent.act(s, 0.5, ActionMask::NONE, &mut rng),
        Err(Error::Contract(_))
    ));
}

#[test]
fn resample_is_masked_after_limit() {
    let mut env = Env::new(zdt1(3), small_env_config(), 9).unwrap();
    for _ in 0..5 {
        assert!(env.mask(ControlMode::Dual, 5).allows(ActionId::Resample));
        env.step(ActionId::Resample, 1.0).unwrap();
    }
    let mask = env.mask(ControlMode::Dual, 5);
    assert!(!mask.allows(ActionId::Resample));
    assert_eq!(mask.count(), 5);
    env.step(ActionId::NdA, 1.0).unwrap();
    assert!(env.mask(ControlMode::Dual, 5).allows(ActionId::Resample));
}

#[test]
fn control_mode_masks() {
    assert_eq!(ControlMode::Dual.base_mask(), ActionMask::ALL);
    assert!(!ControlMode::InfillOnly.base_mask().allows(ActionId::Resample));
    assert_eq!(ControlMode::InfillOnly.base_mask().count(), 5);
    assert_eq!(
        ControlMode::EaOnly.base_mask().allowed(),
        vec![ActionId::Resample, ActionId::NdA]
    );
    let fixed: ControlMode = "fixed:epdi_exploit".parse().unwrap();
    assert_eq!(fixed.base_mask().allowed(), vec![ActionId::EpdiExploit]);
    assert!("fixed:bogus".parse::<ControlMode>().is_err());
    for m in [ControlMode::Dual, ControlMode::InfillOnly, ControlMode::EaOnly, ControlMode::Random, fixed] {
        assert_eq!(m.name().parse::<ControlMode>().unwrap(), m);
    }
}

#[test]
fn resample_keeps_archive_and_infill_grows_it() {
    let mut env = Env::new(zdt1(4), small_env_config(), 11).unwrap();
    let n = env.archive().len();
    let probe = vec![0.3; 4];
    let before = env.model().predict_moments(&probe);
    let out = env.step(ActionId::Resample, 1.0).unwrap();
    assert_eq!((out.reward, out.evaluated), (0.0, 0));
    assert_eq!(env.archive().len(), n);
    assert_eq!(env.budget().t, 8);
    let out = env.step(ActionId::NdA, 1.0).unwrap();
    assert_eq!(out.evaluated, 1);
    assert_eq!(env.archive().len(), n + 1);
    assert_eq!(env.budget().t, 9);
    assert_ne!(env.model().predict_moments(&probe), before);
    assert!(out.reward == -1.0 || out.reward >= 1.0);
}

#[test]
fn stepping_a_finished_episode_fails() {
    let mut env = Env::new(zdt1(3), small_env_config(), 12).unwrap();
    while !env.is_done() {
        env.step(ActionId::EpdiExploit, 1.0).unwrap();
    }
    assert!(matches!(env.step(ActionId::NdA, 1.0), Err(Error::Contract(_))));
}

#[test]
fn episode_spends_exactly_the_remaining_budget() {
    let agent = small_agent(4);
    for (n_init, fe_max) in [(8, 14), (80, 120)] {
        let cfg = EnvConfig {
            n_init,
            fe_max,
            ..small_env_config()
        };
        let env = Env::new(zdt1(5), cfg, 13).unwrap();
        let out = run_episode(&agent, env, ControlMode::Random, 1.0, 13, true).unwrap();
        assert_eq!(out.true_evals, fe_max - n_init);
        assert_eq!(out.archive.len(), fe_max);
        assert!(out.max_resample_run <= 5);
        assert_eq!(out.transitions.len(), out.steps);
        assert!(out.transitions.last().unwrap().done);
        assert_eq!(out.transitions.iter().filter(|t| t.done).count(), 1);
        for t in &out.transitions {
            assert!(t.s.rho >= n_init as f64 / fe_max as f64 && t.s.rho <= 1.0);
        }
    }
}

#[test]
fn td_loss_gradient_matches_finite_differences() {
    let agent = small_agent(4);
    let ts = transitions(&agent, 14);
    let batch: Vec<&Transition<f64>> = ts.iter().take(4).collect();
    // targets far from the current values keep every Huber term on one side of its kink
    let targets: Vec<f64> = batch.iter().map(|t| 5.0 + t.r).collect();
    let err = check_params(&agent.params, 1e-5, 3, |tape, bound| {
        td_loss(&agent, tape, bound, &batch, &targets)
    })
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
    let targets: Vec<f64> = batch.iter().map(|t| 0.1 * t.r).collect();
    let err = check_params(&agent.params, 1e-5, 3, |tape, bound| {
        td_loss(&agent, tape, bound, &batch, &targets)
    })
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn myopic_td_converges_to_reward() {
    let agent = Agent::<f64>::new(
        AgentConfig {
            h: 4,
            gamma: 0.0,
            ..AgentConfig::default()
        },
        5,
    )
    .unwrap();
    let t = transitions(&agent, 15).remove(0);
    let fixed = Transition {
        r: 0.7,
        a: ActionId::NdDpbiConv,
        done: false,
        ..t
    };
    let batch: Vec<&Transition<f64>> = vec![&fixed; 64];
    let mut trainer = Trainer::new(agent);
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = trainer.update(&batch).unwrap();
    }
    let targets = trainer.td_targets(&batch).unwrap();
    assert!(targets.iter().all(|&y| y == 0.7));
    let mut tape = Tape::new();
    let bound = trainer.agent.params.bind_frozen(&mut tape);
    let l = td_loss(&trainer.agent, &mut tape, &bound, &batch, &targets).unwrap();
    let final_loss = tape.value(l)[0];
    assert!(final_loss < 1e-3, "loss {final_loss} (last step {loss})");
}

#[test]
fn training_round_requires_transitions() {
    let mut trainer = Trainer::new(small_agent(4));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(trainer.train_round(&ReplayBuffer::new(), &mut rng).is_err());
}

#[test]
fn training_keeps_q_finite_and_syncs_target() {
    let agent = Agent::<f64>::new(
        AgentConfig {
            h: 4,
            target_sync: 3,
            batch: 8,
            ..AgentConfig::default()
        },
        6,
    )
    .unwrap();
    let mut buffer = ReplayBuffer::new();
    buffer.extend(transitions(&agent, 16));
    let mut trainer = Trainer::new(agent);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2 {
        trainer.update(&buffer.sample(8, &mut rng)).unwrap();
    }
    let values = |p: &crate::tensor::ParamSet<f64>| p.iter().map(|(_, t)| t.data.clone()).collect::<Vec<_>>();
    assert_ne!(values(trainer.target_params()), values(&trainer.agent.params));
    trainer.update(&buffer.sample(8, &mut rng)).unwrap();
    assert_eq!(values(trainer.target_params()), values(&trainer.agent.params));
    let q = trainer.agent.q_values(&buffer.transitions()[0].s).unwrap();
    assert!(q.iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_and_h_guard() {
    let agent = small_agent(4);
    let ts = transitions(&agent, 17);
    let ck = agent.checkpoint();
    let back = Agent::from_checkpoint(&ck, Some(4)).unwrap();
    assert_eq!(back.config, agent.config);
    assert_eq!(back.q_values(&ts[0].s).unwrap(), agent.q_values(&ts[0].s).unwrap());
    assert!(matches!(Agent::from_checkpoint(&ck, Some(16)), Err(Error::Checkpoint(_))));
}

#[test]
fn f32_agent_runs() {
    let agent = Agent::<f32>::new(
        AgentConfig {
            h: 4,
            ..AgentConfig::default()
        },
        0,
    )
    .unwrap();
    let env = Env::new(zdt1(3), small_env_config(), 1).unwrap();
    let out = run_episode(&agent, env, ControlMode::Dual, 0.0, 1, true).unwrap();
    assert_eq!(out.true_evals, 6);
    let batch: Vec<&Transition<f32>> = out.transitions.iter().collect();
    let mut trainer = Trainer::new(agent);
    assert!(trainer.update(&batch).unwrap().is_finite());
}

#[test]
fn epsilon_schedule() {
    let c = AgentConfig::default();
    assert_eq!(c.epsilon(0, 100), 1.0);
    assert!((c.epsilon(25, 100) - 0.525).abs() < 1e-12);
    assert!((c.epsilon(50, 100) - 0.05).abs() < 1e-12);
    assert!((c.epsilon(99, 100) - 0.05).abs() < 1e-12);
}

#[test]
fn replay_sampling_sizes() {
    let agent = small_agent(4);
    let mut buffer = ReplayBuffer::new();
    buffer.extend(transitions(&agent, 18));
    let n = buffer.len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(buffer.sample(64, &mut rng).len(), 64);
    let few = buffer.sample(n, &mut rng);
    let mut ptrs: Vec<usize> = few.iter().map(|t| *t as *const _ as usize).collect();
    ptrs.sort_unstable();
    ptrs.dedup();
    assert_eq!(ptrs.len(), n);
    buffer.clear();
    assert!(buffer.is_empty());
}

#[test]
fn snapshots_are_shared_between_consecutive_transitions() {
    let agent = small_agent(4);
    let ts = transitions(&agent, 19);
    for w in ts.windows(2) {
        assert!(Arc::ptr_eq(&w[0].s_next, &w[1].s));
    }
    let t: &Tensor<f64> = &ts[0].s.pie.m_true;
    assert_eq!(t.shape[3], 2);
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..2.0, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reward_takes_only_partitioned_values(
        front in prop::collection::vec(point(), 1..8),
        new in prop::collection::vec(point(), 1..3),
        lambda in 0.0f64..2.0,
        a in 0usize..6,
    ) {
        let action = ActionId::from_index(a).unwrap();
        let r = reward(action, &new, &front, lambda).unwrap();
        if action == ActionId::Resample {
            prop_assert_eq!(r, 0.0);
        } else {
            prop_assert!(r == -1.0 || r >= 1.0);
            let r0 = reward(action, &new, &front, 0.0).unwrap();
            prop_assert!(r0 == -1.0 || r0 == 1.0);
            prop_assert_eq!(r0 == 1.0, r >= 1.0);
        }
    }

    #[test]
    fn mask_set_algebra(bits in 0u8..64, a in 0usize..6) {
        let m = ActionMask::ALL;
        let action = ActionId::from_index(a).unwrap();
        let sub = ActionId::ALL.into_iter().filter(|x| bits & (1 << x.index()) != 0).fold(ActionMask::NONE, ActionMask::with);
        prop_assert_eq!(sub.count(), bits.count_ones() as usize);
        prop_assert!(!sub.without(action).allows(action));
        prop_assert!(sub.with(action).allows(action));
        prop_assert!(m.allows(action));
    }

    #[test]
    fn epsilon_stays_in_range(ep in 0usize..1000, total in 1usize..1000) {
        let c = AgentConfig::default();
        let e = c.epsilon(ep.min(total - 1), total);
        prop_assert!((0.05..=1.0).contains(&e));
    }
}

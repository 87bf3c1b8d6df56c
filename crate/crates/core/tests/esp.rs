use esp_core::envs::{make_env, symmetry_spec};
use esp_core::esp::*;
use esp_core::game::{Environment, SymmetrySpec, Trajectory};
use esp_core::layout::Action;
use esp_core::mappo::*;
use esp_core::nn::{Actor, Critic, PolicyOutput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block_weights(n: usize) -> Vec<f64> {
    (0..n).map(|b| 0.4 * ((b as f64) * 1.7 + 0.3).sin()).collect()
}

fn cfg() -> PpoConfig {
    PpoConfig { hidden: vec![16, 16], n_envs: 2, horizon: 25, minibatches: 2, epochs: 3, ..PpoConfig::default() }
}

fn rollout(env: &dyn Environment, learner: &Learner, seed: u64) -> Vec<Trajectory> {
    let c = cfg();
    collect_rollouts(env, &learner.actor, &learner.critic, c.n_envs, c.horizon, seed).unwrap().trajectories
}

fn batch_from(trajs: &[Trajectory]) -> RolloutBatch {
    let mut b = RolloutBatch::from_trajectories(trajs).unwrap();
    compute_gae(&mut b, 0.99, 0.95);
    normalize_advantages(&mut b);
    b
}

fn random_learner(env: &dyn Environment, seed: u64) -> Learner {
    Learner::new(env, &cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn fixture_learner(env: &dyn Environment) -> Learner {
    let weights = block_weights(env.obs_layout().slices().len());
    let actor = equivariant_actor(env.obs_layout(), env.action_layout(), &weights, -0.5).unwrap();
    let critic = invariant_critic(env.global_layout(), &block_weights(env.global_layout().slices().len())).unwrap();
    Learner::from_networks(actor, critic, &cfg())
}

#[test]
fn identity_augmentation_reproduces_the_trajectory() {
    let env = make_env("coop_nav", 3).unwrap();
    let learner = random_learner(env.as_ref(), 1);
    let spec = symmetry_spec(env.as_ref(), "c4").unwrap();
    let traj = &rollout(env.as_ref(), &learner, 2)[0];
    let copy =
        augment_trajectory(traj, &spec, &[spec.group.identity().clone()], &learner.actor, &learner.critic).unwrap();
    assert_eq!(&copy[0], traj);
}

#[test]
fn rotated_trajectory_is_a_valid_trajectory() {
    let env = make_env("coop_nav", 3).unwrap();
    let learner = random_learner(env.as_ref(), 3);
    let spec = symmetry_spec(env.as_ref(), "c4").unwrap();
    let traj = rollout(env.as_ref(), &learner, 4).remove(0);
    assert_eq!(traj.len(), 25);
    let r90 = spec.group.by_name("r90").unwrap().clone();
    let aug = augment_trajectory(&traj, &spec, std::slice::from_ref(&r90), &learner.actor, &learner.critic)
        .unwrap()
        .remove(0);
    assert_eq!(aug.len(), 25);
    for (orig, tr) in traj.transitions.iter().zip(&aug.transitions) {
        assert_eq!(tr.reward, orig.reward);
        assert_eq!((tr.done, tr.truncated), (orig.done, orig.truncated));
        assert!(tr.is_augmented);
        assert_eq!(tr.source_element, Some(r90.id()));
        let stepped = env.step(&tr.state, &tr.joint_action).unwrap();
        let dev =
            stepped.state.global.iter().zip(&tr.next_state.global).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-6, "next-state deviation {dev}");
        assert!((stepped.reward - tr.reward).abs() <= 1e-9);
        for (i, a) in tr.joint_action.actions().iter().enumerate() {
            let lp = learner.actor.dist(&tr.state.per_agent_obs[i]).unwrap().log_prob(a).unwrap();
            assert_eq!(lp, tr.behavior_log_probs[i]);
        }
        assert_eq!(tr.value, learner.critic.value(&tr.state.global).unwrap());
    }
}

#[test]
fn buffer_grows_with_each_augmentation_element() {
    let env = make_env("coop_nav", 3).unwrap();
    let learner = random_learner(env.as_ref(), 5);
    let real = rollout(env.as_ref(), &learner, 6);
    let real_count: usize = real.iter().map(Trajectory::len).sum();
    let names = ["r90", "r180", "r270"];
    for k in 1..=3 {
        let esp = EspConfig {
            augmentation_elements: names[..k].iter().map(|s| s.to_string()).collect(),
            ..EspConfig::default()
        }
        .resolve(env.as_ref())
        .unwrap();
        let all = augmented_trajectories(&real, Some(&esp), &learner.actor, &learner.critic).unwrap();
        let batch = batch_from(&all);
        assert_eq!(batch.rows(), (k + 1) * real_count);
        assert_eq!(batch.augmented_count(), k * real_count);
    }
}

#[test]
fn config_rejects_bad_settings() {
    let env = make_env("coop_nav", 3).unwrap();
    let bad = [
        EspConfig { c: -0.1, ..EspConfig::default() },
        EspConfig { augmentation_elements: vec!["e".into()], ..EspConfig::default() },
        EspConfig { augmentation_elements: vec!["r45".into()], ..EspConfig::default() },
        EspConfig { augment_enabled: false, loss_enabled: false, ..EspConfig::default() },
        EspConfig { group: "c8".into(), ..EspConfig::default() },
    ];
    for c in bad {
        assert!(c.resolve(env.as_ref()).is_err(), "{c:?}");
    }
    let d4 = EspConfig {
        group: "d4".into(),
        augmentation_elements: vec!["r90".into(), "flipx".into()],
        ..EspConfig::default()
    };
    assert_eq!(d4.resolve(env.as_ref()).unwrap().augmentation.len(), 2);
}

fn all_rows(b: &RolloutBatch) -> Vec<usize> {
    (0..b.rows()).collect()
}

/// Explicit enumeration of `KL(q ‖ p)` with `q(a) = π(K_g a | L_g o)`.
fn enumerated_policy_loss(
    actor: &Actor,
    batch: &RolloutBatch,
    spec: &SymmetrySpec,
    g: &esp_core::group::GroupElement,
    reversed: bool,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for r in 0..batch.rows() {
        for i in 0..batch.n_agents {
            let o = batch.obs_at(r, i);
            let p = match actor.dist(o).unwrap() {
                PolicyOutput::Categorical(c) => c.probs(),
                _ => unreachable!(),
            };
            let t = actor.dist(&spec.transform_obs(g, o).unwrap()).unwrap();
            let q: Vec<f64> = (0..p.len())
                .map(|a| t.log_prob(&spec.transform_action(g, &Action::Discrete(a)).unwrap()).unwrap().exp())
                .collect();
            let (x, y) = if reversed { (&p, &q) } else { (&q, &p) };
            total += x.iter().zip(y).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn policy_consistency_loss_matches_enumeration() {
    let env = make_env("coop_nav", 3).unwrap();
    let spec = symmetry_spec(env.as_ref(), "d4").unwrap();
    let mut learner = random_learner(env.as_ref(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Perturb away from the near-uniform initialization.
    learner.actor.params.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    let batch = batch_from(&rollout(env.as_ref(), &learner, 8));
    let rows = all_rows(&batch);
    for g in spec.group.elements() {
        for (direction, reversed) in [(KlDirection::AsWritten, false), (KlDirection::Reversed, true)] {
            let opts = PolicyLossOptions { direction, stop_grad_original: false };
            let s = symmetry_policy_loss(&learner.actor, &batch, &rows, &spec, g, opts, None).unwrap();
            if g.is_identity() {
                assert_eq!(s, 0.0);
            } else {
                let oracle = enumerated_policy_loss(&learner.actor, &batch, &spec, g, reversed);
                assert!((s - oracle).abs() < 1e-10, "{g}: {s} vs {oracle}");
                assert!(s > 0.0);
            }
        }
    }
}

#[test]
fn value_consistency_loss_matches_direct_mean() {
    let env = make_env("predator_prey", 3).unwrap();
    let spec = symmetry_spec(env.as_ref(), "c4").unwrap();
    let learner = random_learner(env.as_ref(), 9);
    let batch = batch_from(&rollout(env.as_ref(), &learner, 10));
    let rows = all_rows(&batch);
    for g in spec.group.elements() {
        let s = symmetry_value_loss(&learner.critic, &batch, &rows, &spec, g, None).unwrap();
        let direct = rows
            .iter()
            .map(|&r| {
                let s = batch.global_at(r);
                let d = learner.critic.value(s).unwrap()
                    - learner.critic.value(&spec.transform_global(g, s).unwrap()).unwrap();
                d * d
            })
            .sum::<f64>()
            / rows.len() as f64;
        if g.is_identity() {
            assert_eq!(s, 0.0);
        } else {
            assert!((s - direct).abs() < 1e-12);
        }
    }
    let constant = Critic::zeros(env.global_dim(), &[8]).unwrap();
    for g in spec.group.elements() {
        assert_eq!(symmetry_value_loss(&constant, &batch, &rows, &spec, g, None).unwrap(), 0.0);
    }
}

#[test]
fn equivariant_fixtures_have_zero_consistency_loss() {
    for (name, n) in [("coop_nav", 3), ("predator_prey", 3), ("formation_change", 4)] {
        let env = make_env(name, n).unwrap();
        let spec = symmetry_spec(env.as_ref(), "d4").unwrap();
        let learner = fixture_learner(env.as_ref());
        let batch = batch_from(&rollout(env.as_ref(), &learner, 11));
        let rows = all_rows(&batch);
        for g in spec.group.elements() {
            for direction in [KlDirection::AsWritten, KlDirection::Reversed] {
                let opts = PolicyLossOptions { direction, stop_grad_original: false };
                let mut grad = vec![0.0; learner.actor.params.len()];
                let s = symmetry_policy_loss(&learner.actor, &batch, &rows, &spec, g, opts, Some((&mut grad, 1.0)))
                    .unwrap();
                assert!(s.abs() < 1e-9, "{name} {g}: {s}");
                assert!(grad.iter().all(|x| x.abs() < 1e-9));
            }
            let mut grad = vec![0.0; learner.critic.params.len()];
            let s = symmetry_value_loss(&learner.critic, &batch, &rows, &spec, g, Some((&mut grad, 1.0))).unwrap();
            assert!(s < 1e-9);
            assert!(grad.iter().all(|x| x.abs() < 1e-9));
            let ratios = ratio_diagnostic(&learner.actor, &batch, &spec, g).unwrap();
            assert!((ratios.min - 1.0).abs() < 1e-9 && (ratios.max - 1.0).abs() < 1e-9, "{name} {g}: {ratios:?}");
        }
    }
}

#[test]
fn consistency_terms_do_not_move_an_equivariant_learner() {
    let env = make_env("coop_nav", 3).unwrap();
    let base = fixture_learner(env.as_ref());
    let batch = batch_from(&rollout(env.as_ref(), &base, 12));
    let esp = EspConfig { augment_enabled: false, ..EspConfig::default() }.resolve(env.as_ref()).unwrap();
    // A single optimizer step: afterwards the policy is no longer equivariant.
    let one_step = PpoConfig { epochs: 1, minibatches: 1, ..cfg() };
    let mut plain = base.clone();
    let mut with_loss = base.clone();
    ppo_update(&mut plain, &batch, &one_step, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
    let stats = esp_update(&mut with_loss, &batch, &one_step, &esp, &mut ChaCha8Rng::seed_from_u64(1), &mut aux_rng(1))
        .unwrap();
    assert!(stats.sym_policy_loss < 1e-9 && stats.sym_value_loss < 1e-9);
    let delta = |l: &Learner| -> Vec<f64> {
        l.actor
            .params
            .values()
            .iter()
            .zip(base.actor.params.values())
            .chain(l.critic.params.values().iter().zip(base.critic.params.values()))
            .map(|(a, b)| a - b)
            .collect()
    };
    for (a, b) in delta(&plain).iter().zip(delta(&with_loss)) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn zero_coefficient_without_augmentation_is_the_baseline_update() {
    let env = make_env("coop_nav", 3).unwrap();
    let base = random_learner(env.as_ref(), 13);
    let batch = batch_from(&rollout(env.as_ref(), &base, 14));
    let esp = EspConfig { augment_enabled: false, c: 0.0, ..EspConfig::default() }.resolve(env.as_ref()).unwrap();
    assert!(!esp.loss_active());
    let mut a = base.clone();
    let mut b = base.clone();
    let sa = ppo_update(&mut a, &batch, &cfg(), &mut ChaCha8Rng::seed_from_u64(2), None).unwrap();
    let sb = esp_update(&mut b, &batch, &cfg(), &esp, &mut ChaCha8Rng::seed_from_u64(2), &mut aux_rng(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(format!("{sa:?}"), format!("{sb:?}"));
}

#[test]
fn active_consistency_loss_changes_the_update() {
    let env = make_env("coop_nav", 3).unwrap();
    let base = random_learner(env.as_ref(), 15);
    let batch = batch_from(&rollout(env.as_ref(), &base, 16));
    let esp = EspConfig { augment_enabled: false, ..EspConfig::default() }.resolve(env.as_ref()).unwrap();
    let mut a = base.clone();
    let mut b = base.clone();
    ppo_update(&mut a, &batch, &cfg(), &mut ChaCha8Rng::seed_from_u64(3), None).unwrap();
    let stats = esp_update(&mut b, &batch, &cfg(), &esp, &mut ChaCha8Rng::seed_from_u64(3), &mut aux_rng(3)).unwrap();
    assert_ne!(a.actor.params, b.actor.params);
    assert!(stats.sym_policy_loss > 0.0 && stats.sym_value_loss > 0.0);
}

#[test]
fn fresh_policy_ratios_deviate_from_one() {
    let env = make_env("coop_nav", 3).unwrap();
    let spec = symmetry_spec(env.as_ref(), "c4").unwrap();
    let learner = random_learner(env.as_ref(), 17);
    let batch = batch_from(&rollout(env.as_ref(), &learner, 18));
    let id = ratio_diagnostic(&learner.actor, &batch, &spec, spec.group.identity()).unwrap();
    assert_eq!((id.min, id.max, id.mean), (1.0, 1.0, 1.0));
    for g in spec.group.non_identity() {
        let r = ratio_diagnostic(&learner.actor, &batch, &spec, g).unwrap();
        assert!(r.max > 1.0 + 1e-6, "{g}: {r:?}");
        assert!(r.min <= r.mean && r.mean <= r.max && r.p99 <= r.max);
        assert_eq!(r.count, batch.rows() * 3);
    }
}

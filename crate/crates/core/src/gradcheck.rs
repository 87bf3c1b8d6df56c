//! Central finite-difference checks of every analytic loss gradient used in
//! training, on small random networks and batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::esp::{symmetry_policy_loss, symmetry_value_loss, KlDirection, PolicyLossOptions};
use crate::game::SymmetrySpec;
use crate::group::cyclic_group;
use crate::layout::{Action, ActionLayout, ObservationLayout};
use crate::mappo::{policy_loss, value_loss, RolloutBatch};
use crate::nn::{ActionHead, Actor, Critic};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor, relative to the loss magnitude, so that components that
/// are structurally zero (e.g. an output bias that cancels in a difference)
/// are compared against rounding noise rather than against zero.
const FLOOR: f64 = 1e-6;

pub const LOSS_NAMES: [&str; 8] = [
    "ppo_surrogate_discrete",
    "ppo_surrogate_continuous",
    "entropy_discrete",
    "entropy_continuous",
    "value_mse",
    "sym_policy_discrete",
    "sym_policy_continuous",
    "sym_value",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub loss: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Max over coordinates of `|fd − g| / max(|fd|, |g|, floor · max(1, |f(x)|))`.
pub fn max_relative_error(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut v = x.to_vec();
    let floor = FLOOR * f(&v).abs().max(1.0);
    let mut worst: f64 = 0.0;
    for k in 0..v.len() {
        let orig = v[k];
        v[k] = orig + STEP;
        let up = f(&v);
        v[k] = orig - STEP;
        let down = f(&v);
        v[k] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

const OBS_BLOCKS: usize = 2;
const GLOBAL_BLOCKS: usize = 3;
const ROWS: usize = 3;
const AGENTS: usize = 2;

struct Instance {
    actor: Actor,
    critic: Critic,
    batch: RolloutBatch,
    spec: SymmetrySpec,
}

fn instance(rng: &mut ChaCha8Rng, continuous: bool) -> Result<Instance> {
    let act = if continuous { ActionLayout::Continuous2d } else { ActionLayout::five_moves() };
    let head = if continuous { ActionHead::Gaussian { dim: 2 } } else { ActionHead::Categorical { n_actions: 5 } };
    let obs_layout = ObservationLayout::geometric(OBS_BLOCKS);
    let global_layout = ObservationLayout::geometric(GLOBAL_BLOCKS);
    let spec = SymmetrySpec::new(cyclic_group(4)?, obs_layout.clone(), act, global_layout.clone())?;
    let mut actor = Actor::zeros(obs_layout.len(), &[6, 5], head)?;
    let mut critic = Critic::zeros(global_layout.len(), &[6, 5])?;
    for v in actor.params.values_mut().iter_mut().chain(critic.params.values_mut()) {
        *v = rng.random_range(-0.9..0.9);
    }
    let mut b = RolloutBatch {
        n_agents: AGENTS,
        obs_dim: obs_layout.len(),
        global_dim: global_layout.len(),
        ..Default::default()
    };
    for _ in 0..ROWS {
        for _ in 0..AGENTS {
            let obs: Vec<f64> = (0..b.obs_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let dist = actor.dist(&obs)?;
            let a = if continuous {
                Action::Continuous([rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
            } else {
                Action::Discrete(rng.random_range(0..5))
            };
            b.behavior_log_probs.push(dist.log_prob(&a)? + rng.random_range(-0.4..0.4));
            b.actions.push(a);
            b.obs.extend(obs);
        }
        b.global.extend((0..b.global_dim).map(|_| rng.random_range(-1.5..1.5)));
        b.rewards.push(0.0);
        b.values.push(0.0);
        b.next_values.push(0.0);
        b.dones.push(false);
        b.truncated.push(false);
        b.segment_end.push(false);
        b.is_augmented.push(false);
        b.advantages.push(rng.random_range(-2.0..2.0));
        b.targets.push(rng.random_range(-2.0..2.0));
    }
    Ok(Instance { actor, critic, batch: b, spec })
}

fn check_one(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let continuous = name.ends_with("continuous");
    let mut inst = instance(rng, continuous)?;
    let rows: Vec<usize> = (0..ROWS).collect();
    let g = inst.spec.group.elements()[rng.random_range(1..4)].clone();
    let direction = if rng.random_bool(0.5) { KlDirection::AsWritten } else { KlDirection::Reversed };
    let opts = PolicyLossOptions { direction, stop_grad_original: false };
    let clip = 0.2;
    if name.starts_with("entropy") {
        inst.batch.advantages.fill(0.0);
    }
    let on_actor = !matches!(name, "value_mse" | "sym_value");
    let eval = |actor: &Actor, critic: &Critic, grad: Option<&mut [f64]>| -> Result<f64> {
        let b = &inst.batch;
        Ok(match name {
            n if n.starts_with("ppo_surrogate") => policy_loss(actor, b, &rows, clip, 0.0, grad)?.loss,
            n if n.starts_with("entropy") => policy_loss(actor, b, &rows, clip, 1.0, grad)?.loss,
            "value_mse" => value_loss(critic, b, &rows, grad)?,
            n if n.starts_with("sym_policy") => {
                symmetry_policy_loss(actor, b, &rows, &inst.spec, &g, opts, grad.map(|g| (g, 1.0)))?
            }
            _ => symmetry_value_loss(critic, b, &rows, &inst.spec, &g, grad.map(|g| (g, 1.0)))?,
        })
    };
    let (actor, critic) = (&inst.actor, &inst.critic);
    if on_actor {
        let mut grad = vec![0.0; actor.params.len()];
        eval(actor, critic, Some(&mut grad))?;
        let mut probe = actor.clone();
        Ok(max_relative_error(
            |v| {
                probe.params.set_values(v).expect("same length");
                eval(&probe, critic, None).expect("loss evaluates")
            },
            actor.params.values(),
            &grad,
        ))
    } else {
        let mut grad = vec![0.0; critic.params.len()];
        eval(actor, critic, Some(&mut grad))?;
        let mut probe = critic.clone();
        Ok(max_relative_error(
            |v| {
                probe.params.set_values(v).expect("same length");
                eval(actor, &probe, None).expect("loss evaluates")
            },
            critic.params.values(),
            &grad,
        ))
    }
}

/// Runs `instances` random instances of every loss.
pub fn run_gradient_checks(instances: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    LOSS_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(check_one(name, &mut rng)?);
            }
            Ok(GradCheckResult { loss: name.to_string(), instances, max_rel_error: worst, passed: worst < TOLERANCE })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_gradient_matches_finite_differences() {
        for r in run_gradient_checks(10, 7).unwrap() {
            assert!(r.passed, "{}: {}", r.loss, r.max_rel_error);
        }
    }
}

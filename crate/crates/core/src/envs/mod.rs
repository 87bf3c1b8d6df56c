//! Particle-world task implementations and the name-based registry used by
//! the CLI configuration.

mod coop_nav;
mod formation;
pub mod particle;
mod predator_prey;

pub use coop_nav::{CooperativeNavigation, Perturbation};
pub use formation::{FormationChange, ARRIVAL_BONUS, RISKY_DISTANCE};
pub use predator_prey::{PredatorPrey, CAPTURE_BONUS, DISTANCE_SHAPING};

use crate::error::{EspError, Result};
use crate::game::{Environment, SymmetrySpec};
use crate::group::group_by_name;

pub const COLLISION_PENALTY: f64 = 1.0;
pub const EPISODE_STEPS_PARTICLE: usize = 25;

pub const ENV_NAMES: [&str; 3] = ["coop_nav", "predator_prey", "formation_change"];

pub fn make_cooperative_navigation(n_agents: usize) -> Result<CooperativeNavigation> {
    CooperativeNavigation::new(n_agents)
}

pub fn make_predator_prey(n_predators: usize) -> Result<PredatorPrey> {
    PredatorPrey::new(n_predators)
}

pub fn make_formation_change(n_robots: usize) -> Result<FormationChange> {
    FormationChange::new(n_robots)
}

/// Builds an environment from its config name and agent count.
pub fn make_env(name: &str, n_agents: usize) -> Result<Box<dyn Environment>> {
    Ok(match name {
        "coop_nav" => Box::new(CooperativeNavigation::new(n_agents)?),
        "predator_prey" => Box::new(PredatorPrey::new(n_agents)?),
        "formation_change" => Box::new(FormationChange::new(n_agents)?),
        other => {
            return Err(EspError::invalid(format!(
                "unknown environment `{other}` (expected one of {})",
                ENV_NAMES.join(", ")
            )))
        }
    })
}

/// Default agent count for each named environment.
pub fn default_agents(name: &str) -> usize {
    match name {
        "formation_change" => 8,
        _ => 3,
    }
}

/// The symmetry spec of `env` under a named group, after checking the
/// environment declares that group.
pub fn symmetry_spec(env: &dyn Environment, group: &str) -> Result<SymmetrySpec> {
    let lower = group.to_ascii_lowercase();
    if !env.supported_groups().contains(&lower.as_str()) {
        return Err(EspError::invalid(format!("`{}` is not symmetric under `{group}`", env.name())));
    }
    SymmetrySpec::for_env(env, group_by_name(&lower)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{random_joint_action, JointAction};
    use crate::layout::Action;
    use particle::kinetic_energy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_builds_every_env() {
        for name in ENV_NAMES {
            let env = make_env(name, default_agents(name)).unwrap();
            assert_eq!(env.name(), name);
            symmetry_spec(env.as_ref(), "c4").unwrap();
            symmetry_spec(env.as_ref(), "d4").unwrap();
        }
        assert!(make_env("tag", 3).is_err());
        assert!(symmetry_spec(make_env("coop_nav", 3).unwrap().as_ref(), "c8").is_err());
    }

    #[test]
    fn rewards_stay_within_declared_bounds() {
        for name in ENV_NAMES {
            let env = make_env(name, default_agents(name)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut state = env.reset(0);
            for step in 0..20_000u64 {
                let out = env.step(&state, &random_joint_action(env.as_ref(), &mut rng)).unwrap();
                assert!(out.reward.is_finite() && out.reward.abs() <= env.reward_bound(), "{name}: {}", out.reward);
                state = if out.done || out.truncated { env.reset(step) } else { out.state };
            }
        }
    }

    #[test]
    fn observations_commute_with_group_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ENV_NAMES {
            let env = make_env(name, default_agents(name)).unwrap();
            let spec = symmetry_spec(env.as_ref(), "d4").unwrap();
            let mut state = env.reset(1);
            for _ in 0..10 {
                state = env.step(&state, &random_joint_action(env.as_ref(), &mut rng)).unwrap().state;
            }
            for g in spec.group.elements() {
                let rebuilt = env.observe(&spec.transform_global(g, &state.global).unwrap());
                for (i, obs) in state.per_agent_obs.iter().enumerate() {
                    let moved = spec.transform_obs(g, obs).unwrap();
                    for (a, b) in moved.iter().zip(&rebuilt[i]) {
                        assert!((a - b).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_actions_never_add_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases: [(&str, usize, Action); 3] = [
            ("coop_nav", 3, Action::Discrete(0)),
            ("predator_prey", 3, Action::Discrete(0)),
            ("formation_change", 8, Action::Continuous([0.0, 0.0])),
        ];
        for (name, n, zero) in cases {
            let env = make_env(name, n).unwrap();
            let mut state = env.reset(2);
            for _ in 0..5 {
                state = env.step(&state, &random_joint_action(env.as_ref(), &mut rng)).unwrap().state;
            }
            let mut prev = kinetic_energy(&state.global, n, n);
            for _ in 0..15 {
                state = env.step(&state, &JointAction(vec![zero; n])).unwrap().state;
                let e = kinetic_energy(&state.global, n, n);
                assert!(e <= prev + 1e-15, "{name}");
                prev = e;
            }
        }
    }
}

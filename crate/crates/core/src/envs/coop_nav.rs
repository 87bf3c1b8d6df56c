//! Cooperative navigation: `n` agents must cover `n` landmarks without
//! bumping into each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::particle::{block, dist, set_block, sub, Physics};
use super::{COLLISION_PENALTY, EPISODE_STEPS_PARTICLE};
use crate::error::{EspError, Result};
use crate::game::{validate_step, EnvState, Environment, JointAction, RiskInfo, StepOutcome};
use crate::layout::{Action, ActionLayout, ObservationLayout};

const AGENT_RADIUS: f64 = 0.15;
const SPAWN_HALF_WIDTH: f64 = 1.0;
const LANDMARK_HALF_WIDTH: f64 = 0.9;
const WIND_ACCEL: f64 = 1.5;

/// Deliberate symmetry breakers used as negative controls by the checkers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    None,
    /// Adds the first agent's absolute x coordinate to the reward.
    AbsolutePositionReward,
    /// A constant wind pushing every agent along +x.
    XWind,
    /// Claims stochastic dynamics (the transition checker must refuse it).
    StochasticFlag,
}

#[derive(Clone, Debug)]
pub struct CooperativeNavigation {
    n: usize,
    physics: Physics,
    obs_layout: ObservationLayout,
    global_layout: ObservationLayout,
    act_layout: ActionLayout,
    perturbation: Perturbation,
    name: String,
}

/// Global state: agent positions, agent velocities, landmark positions.
const POS: usize = 0;

impl CooperativeNavigation {
    pub fn new(n_agents: usize) -> Result<Self> {
        Self::with_perturbation(n_agents, Perturbation::None)
    }

    pub fn with_perturbation(n_agents: usize, perturbation: Perturbation) -> Result<Self> {
        if n_agents < 2 {
            return Err(EspError::invalid(format!("cooperative navigation needs at least 2 agents, got {n_agents}")));
        }
        let n = n_agents;
        let name = match perturbation {
            Perturbation::None => "coop_nav".to_string(),
            Perturbation::AbsolutePositionReward => "coop_nav+abs_reward".to_string(),
            Perturbation::XWind => "coop_nav+x_wind".to_string(),
            Perturbation::StochasticFlag => "coop_nav+stochastic".to_string(),
        };
        Ok(CooperativeNavigation {
            n,
            physics: Physics::particle_default(5.0, 2.0, 1.5),
            // own velocity, own position, landmarks relative, other agents relative
            obs_layout: ObservationLayout::geometric(2 + n + (n - 1)),
            global_layout: ObservationLayout::geometric(3 * n),
            act_layout: ActionLayout::five_moves(),
            perturbation,
            name,
        })
    }

    pub fn physics(&self) -> &Physics {
        &self.physics
    }

    fn vel_base(&self) -> usize {
        self.n
    }

    fn landmark_base(&self) -> usize {
        2 * self.n
    }

    pub fn agent_pos(&self, global: &[f64], i: usize) -> [f64; 2] {
        block(global, POS, i)
    }

    pub fn landmark_pos(&self, global: &[f64], j: usize) -> [f64; 2] {
        block(global, self.landmark_base(), j)
    }

    /// Builds a global state from explicit positions (zero velocities).
    pub fn state_from_positions(&self, agents: &[[f64; 2]], landmarks: &[[f64; 2]]) -> Result<EnvState> {
        if agents.len() != self.n || landmarks.len() != self.n {
            return Err(EspError::invalid("expected one position per agent and per landmark"));
        }
        let mut global = vec![0.0; self.global_layout.len()];
        for (i, p) in agents.iter().enumerate() {
            set_block(&mut global, POS, i, *p);
        }
        for (j, p) in landmarks.iter().enumerate() {
            set_block(&mut global, self.landmark_base(), j, *p);
        }
        Ok(self.make_state(global, 0))
    }

    fn make_state(&self, global: Vec<f64>, t: usize) -> EnvState {
        let per_agent_obs = self.observe(&global);
        EnvState { global, per_agent_obs, t, done: false }
    }

    fn collisions(&self, global: &[f64]) -> usize {
        let mut count = 0;
        for i in 0..self.n {
            for k in (i + 1)..self.n {
                if dist(&self.agent_pos(global, i), &self.agent_pos(global, k)) < 2.0 * AGENT_RADIUS {
                    count += 1;
                }
            }
        }
        count
    }

    /// `−Σ_landmarks min_agent dist − penalty · #collisions`.
    pub fn reward(&self, global: &[f64]) -> f64 {
        let mut cover = 0.0;
        for j in 0..self.n {
            let l = self.landmark_pos(global, j);
            cover += (0..self.n).map(|i| dist(&self.agent_pos(global, i), &l)).fold(f64::INFINITY, f64::min);
        }
        let mut r = -cover - COLLISION_PENALTY * self.collisions(global) as f64;
        if self.perturbation == Perturbation::AbsolutePositionReward {
            r += self.agent_pos(global, 0)[0];
        }
        r
    }
}

impl Environment for CooperativeNavigation {
    fn name(&self) -> &str {
        &self.name
    }

    fn n_agents(&self) -> usize {
        self.n
    }

    fn obs_layout(&self) -> &ObservationLayout {
        &self.obs_layout
    }

    fn global_layout(&self) -> &ObservationLayout {
        &self.global_layout
    }

    fn action_layout(&self) -> &ActionLayout {
        &self.act_layout
    }

    fn max_steps(&self) -> usize {
        EPISODE_STEPS_PARTICLE
    }

    fn reward_bound(&self) -> f64 {
        let diag = 2.0 * std::f64::consts::SQRT_2 * self.physics.arena_half_width;
        let pairs = (self.n * (self.n - 1) / 2) as f64;
        let extra =
            if self.perturbation == Perturbation::AbsolutePositionReward { self.physics.arena_half_width } else { 0.0 };
        self.n as f64 * diag + COLLISION_PENALTY * pairs + extra
    }

    fn is_stochastic(&self) -> bool {
        self.perturbation == Perturbation::StochasticFlag
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut global = vec![0.0; self.global_layout.len()];
        for i in 0..self.n {
            let p = [
                rng.random_range(-SPAWN_HALF_WIDTH..SPAWN_HALF_WIDTH),
                rng.random_range(-SPAWN_HALF_WIDTH..SPAWN_HALF_WIDTH),
            ];
            set_block(&mut global, POS, i, p);
        }
        for j in 0..self.n {
            let p = [
                rng.random_range(-LANDMARK_HALF_WIDTH..LANDMARK_HALF_WIDTH),
                rng.random_range(-LANDMARK_HALF_WIDTH..LANDMARK_HALF_WIDTH),
            ];
            set_block(&mut global, self.landmark_base(), j, p);
        }
        self.make_state(global, 0)
    }

    fn observe(&self, global: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let me = self.agent_pos(global, i);
                let mut obs = Vec::with_capacity(self.obs_layout.len());
                obs.extend_from_slice(&block(global, self.vel_base(), i));
                obs.extend_from_slice(&me);
                for j in 0..self.n {
                    obs.extend_from_slice(&sub(&self.landmark_pos(global, j), &me));
                }
                for k in (0..self.n).filter(|&k| k != i) {
                    obs.extend_from_slice(&sub(&self.agent_pos(global, k), &me));
                }
                obs
            })
            .collect()
    }

    fn step(&self, state: &EnvState, joint: &JointAction) -> Result<StepOutcome> {
        validate_step(self, state, joint)?;
        let ActionLayout::Discrete { displacements } = &self.act_layout else { unreachable!() };
        let mut global = state.global.clone();
        for (i, a) in joint.actions().iter().enumerate() {
            let Action::Discrete(idx) = a else { unreachable!("validated") };
            let d = displacements[*idx];
            let mut accel = [d[0] * self.physics.accel_scale, d[1] * self.physics.accel_scale];
            if self.perturbation == Perturbation::XWind {
                accel[0] += WIND_ACCEL;
            }
            let mut pos = block(&global, POS, i);
            let mut vel = block(&global, self.vel_base(), i);
            self.physics.integrate(&mut pos, &mut vel, accel);
            set_block(&mut global, POS, i, pos);
            set_block(&mut global, self.vel_base(), i, vel);
        }
        let reward = self.reward(&global);
        let t = state.t + 1;
        Ok(StepOutcome { state: self.make_state(global, t), reward, done: false, truncated: t >= self.max_steps() })
    }

    fn risk(&self, global: &[f64]) -> RiskInfo {
        let collisions = self.collisions(global);
        RiskInfo { collisions, risky: collisions > 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{check_reward_invariance, check_transition_equivariance, SymmetrySpec};
    use crate::group::group_by_name;

    fn noop(n: usize) -> JointAction {
        JointAction(vec![Action::Discrete(0); n])
    }

    #[test]
    fn constructor_rejects_single_agent() {
        assert!(CooperativeNavigation::new(1).is_err());
        assert!(CooperativeNavigation::new(2).is_ok());
    }

    #[test]
    fn reset_is_deterministic_and_in_bounds() {
        let env = CooperativeNavigation::new(3).unwrap();
        let a = env.reset(0);
        assert_eq!(a, env.reset(0));
        assert_ne!(a.global, env.reset(1).global);
        assert_eq!(a.global.len(), 18);
        assert_eq!(a.per_agent_obs.len(), 3);
        for i in 0..3 {
            let p = env.agent_pos(&a.global, i);
            let l = env.landmark_pos(&a.global, i);
            for x in p.iter().chain(&l) {
                assert!(x.abs() <= env.physics().arena_half_width);
            }
            assert_eq!(a.per_agent_obs[i].len(), 14);
        }
    }

    #[test]
    fn noop_from_rest_keeps_positions() {
        let env = CooperativeNavigation::new(3).unwrap();
        let s = env.reset(4);
        let out = env.step(&s, &noop(3)).unwrap();
        assert_eq!(out.state.global, s.global);
        assert_eq!(out.state.t, 1);
    }

    #[test]
    fn covered_landmarks_cost_nothing() {
        let env = CooperativeNavigation::new(3).unwrap();
        let pts = [[-1.0, 0.0], [0.0, 0.5], [1.0, 0.0]];
        let s = env.state_from_positions(&pts, &pts).unwrap();
        assert_eq!(env.reward(&s.global), 0.0);
        let crowded = env.state_from_positions(&[[0.0, 0.0], [0.1, 0.0], [1.0, 1.0]], &pts).unwrap();
        assert!(env.risk(&crowded.global).collisions == 1);
    }

    #[test]
    fn step_contract_errors() {
        let env = CooperativeNavigation::new(3).unwrap();
        let mut s = env.reset(0);
        assert!(env.step(&s, &JointAction(vec![Action::Discrete(9); 3])).is_err());
        assert!(env.step(&s, &noop(2)).is_err());
        assert!(env.step(&s, &JointAction(vec![Action::Continuous([0.0, 0.0]); 3])).is_err());
        s.done = true;
        assert!(env.step(&s, &noop(3)).is_err());
        let mut s = env.reset(0);
        s.t = env.max_steps();
        assert!(env.step(&s, &noop(3)).is_err());
    }

    #[test]
    fn truncates_after_25_steps() {
        let env = CooperativeNavigation::new(3).unwrap();
        let mut s = env.reset(2);
        for t in 1..=25 {
            let out = env.step(&s, &noop(3)).unwrap();
            assert_eq!(out.truncated, t == 25);
            assert!(!out.done);
            s = out.state;
        }
    }

    #[test]
    fn symmetric_under_c4_and_d4() {
        let env = CooperativeNavigation::new(3).unwrap();
        for g in ["c4", "d4"] {
            let spec = SymmetrySpec::for_env(&env, group_by_name(g).unwrap()).unwrap();
            assert!(check_reward_invariance(&env, &spec, 200, 1).unwrap().passed);
            assert!(check_transition_equivariance(&env, &spec, 200, 1).unwrap().passed);
        }
    }

    #[test]
    fn perturbations_break_symmetry() {
        let c4 = group_by_name("c4").unwrap();
        let env = CooperativeNavigation::with_perturbation(3, Perturbation::AbsolutePositionReward).unwrap();
        let spec = SymmetrySpec::for_env(&env, c4.clone()).unwrap();
        let rep = check_reward_invariance(&env, &spec, 200, 3).unwrap();
        assert!(!rep.passed && rep.max_deviation > 0.1 && rep.witness.is_some());

        let env = CooperativeNavigation::with_perturbation(3, Perturbation::XWind).unwrap();
        let spec = SymmetrySpec::for_env(&env, c4.clone()).unwrap();
        let rep = check_transition_equivariance(&env, &spec, 200, 3).unwrap();
        assert!(!rep.passed && rep.witness.is_some());

        let env = CooperativeNavigation::with_perturbation(3, Perturbation::StochasticFlag).unwrap();
        let spec = SymmetrySpec::for_env(&env, c4).unwrap();
        assert!(matches!(check_transition_equivariance(&env, &spec, 10, 0), Err(EspError::UnsupportedCheck(_))));
    }
}

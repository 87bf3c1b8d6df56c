//! Predator-prey: learned predators chase a scripted prey that flees from
//! the nearest predator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::particle::{block, dist, norm, set_block, sub, Physics};
use super::EPISODE_STEPS_PARTICLE;
use crate::error::{EspError, Result};
use crate::game::{validate_step, EnvState, Environment, JointAction, RiskInfo, StepOutcome};
use crate::group::Vec2;
use crate::layout::{Action, ActionLayout, ObservationLayout};

pub const CAPTURE_BONUS: f64 = 10.0;
pub const DISTANCE_SHAPING: f64 = 0.1;
const PREDATOR_RADIUS: f64 = 0.15;
const PREY_RADIUS: f64 = 0.05;
const ARENA_HALF_WIDTH: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct PredatorPrey {
    n: usize,
    predator_physics: Physics,
    prey_physics: Physics,
    obs_layout: ObservationLayout,
    global_layout: ObservationLayout,
    act_layout: ActionLayout,
}

// Global state blocks: predator positions [0, n), predator velocities
// [n, 2n), prey position 2n, prey velocity 2n + 1.
impl PredatorPrey {
    pub fn new(n_predators: usize) -> Result<Self> {
        if n_predators < 2 {
            return Err(EspError::invalid(format!("predator-prey needs at least 2 predators, got {n_predators}")));
        }
        let n = n_predators;
        Ok(PredatorPrey {
            n,
            predator_physics: Physics::particle_default(3.0, 1.0, ARENA_HALF_WIDTH),
            prey_physics: Physics::particle_default(4.0, 1.3, ARENA_HALF_WIDTH),
            // own velocity, own position, other predators relative, prey relative, prey velocity
            obs_layout: ObservationLayout::geometric(2 + (n - 1) + 2),
            global_layout: ObservationLayout::geometric(2 * n + 2),
            act_layout: ActionLayout::five_moves(),
        })
    }

    pub fn predator_pos(&self, global: &[f64], i: usize) -> Vec2 {
        block(global, 0, i)
    }

    pub fn prey_pos(&self, global: &[f64]) -> Vec2 {
        block(global, 2 * self.n, 0)
    }

    fn prey_vel(&self, global: &[f64]) -> Vec2 {
        block(global, 2 * self.n, 1)
    }

    pub fn capture_distance(&self) -> f64 {
        PREDATOR_RADIUS + PREY_RADIUS
    }

    /// Builds a state from explicit positions with everything at rest.
    pub fn state_from_positions(&self, predators: &[Vec2], prey: Vec2) -> Result<EnvState> {
        if predators.len() != self.n {
            return Err(EspError::invalid("expected one position per predator"));
        }
        let mut global = vec![0.0; self.global_layout.len()];
        for (i, p) in predators.iter().enumerate() {
            set_block(&mut global, 0, i, *p);
        }
        set_block(&mut global, 2 * self.n, 0, prey);
        Ok(self.make_state(global, 0))
    }

    fn make_state(&self, global: Vec<f64>, t: usize) -> EnvState {
        let per_agent_obs = self.observe(&global);
        EnvState { global, per_agent_obs, t, done: false }
    }

    /// The prey's scripted acceleration: full thrust directly away from the
    /// nearest predator (lowest index wins ties; zero if coincident).
    pub fn prey_acceleration(&self, global: &[f64]) -> Vec2 {
        let prey = self.prey_pos(global);
        let mut nearest = 0;
        let mut best = f64::INFINITY;
        for i in 0..self.n {
            let d = dist(&self.predator_pos(global, i), &prey);
            if d < best {
                best = d;
                nearest = i;
            }
        }
        let away = sub(&prey, &self.predator_pos(global, nearest));
        let len = norm(&away);
        if len == 0.0 {
            return [0.0, 0.0];
        }
        let s = self.prey_physics.accel_scale / len;
        [away[0] * s, away[1] * s]
    }

    fn min_predator_distance(&self, global: &[f64]) -> f64 {
        let prey = self.prey_pos(global);
        (0..self.n).map(|i| dist(&self.predator_pos(global, i), &prey)).fold(f64::INFINITY, f64::min)
    }

    /// `+10` if any predator overlaps the prey, minus `0.1 · min distance`.
    pub fn reward(&self, global: &[f64]) -> f64 {
        let d = self.min_predator_distance(global);
        let bonus = if d < self.capture_distance() { CAPTURE_BONUS } else { 0.0 };
        bonus - DISTANCE_SHAPING * d
    }
}

impl Environment for PredatorPrey {
    fn name(&self) -> &str {
        "predator_prey"
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
        CAPTURE_BONUS + DISTANCE_SHAPING * 2.0 * std::f64::consts::SQRT_2 * ARENA_HALF_WIDTH
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut global = vec![0.0; self.global_layout.len()];
        for i in 0..self.n {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            set_block(&mut global, 0, i, p);
        }
        let prey = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        set_block(&mut global, 2 * self.n, 0, prey);
        self.make_state(global, 0)
    }

    fn observe(&self, global: &[f64]) -> Vec<Vec<f64>> {
        let prey = self.prey_pos(global);
        let prey_vel = self.prey_vel(global);
        (0..self.n)
            .map(|i| {
                let me = self.predator_pos(global, i);
                let mut obs = Vec::with_capacity(self.obs_layout.len());
                obs.extend_from_slice(&block(global, self.n, i));
                obs.extend_from_slice(&me);
                for k in (0..self.n).filter(|&k| k != i) {
                    obs.extend_from_slice(&sub(&self.predator_pos(global, k), &me));
                }
                obs.extend_from_slice(&sub(&prey, &me));
                obs.extend_from_slice(&prey_vel);
                obs
            })
            .collect()
    }

    fn step(&self, state: &EnvState, joint: &JointAction) -> Result<StepOutcome> {
        validate_step(self, state, joint)?;
        let ActionLayout::Discrete { displacements } = &self.act_layout else { unreachable!() };
        let mut global = state.global.clone();
        // The prey reacts to the positions at the start of the step.
        let prey_accel = self.prey_acceleration(&state.global);
        for (i, a) in joint.actions().iter().enumerate() {
            let Action::Discrete(idx) = a else { unreachable!("validated") };
            let d = displacements[*idx];
            let scale = self.predator_physics.accel_scale;
            let mut pos = block(&global, 0, i);
            let mut vel = block(&global, self.n, i);
            self.predator_physics.integrate(&mut pos, &mut vel, [d[0] * scale, d[1] * scale]);
            set_block(&mut global, 0, i, pos);
            set_block(&mut global, self.n, i, vel);
        }
        let mut pos = self.prey_pos(&global);
        let mut vel = self.prey_vel(&global);
        self.prey_physics.integrate(&mut pos, &mut vel, prey_accel);
        set_block(&mut global, 2 * self.n, 0, pos);
        set_block(&mut global, 2 * self.n, 1, vel);

        let reward = self.reward(&global);
        let t = state.t + 1;
        Ok(StepOutcome { state: self.make_state(global, t), reward, done: false, truncated: t >= self.max_steps() })
    }

    fn risk(&self, global: &[f64]) -> RiskInfo {
        let mut collisions = 0;
        for i in 0..self.n {
            for k in (i + 1)..self.n {
                if dist(&self.predator_pos(global, i), &self.predator_pos(global, k)) < 2.0 * PREDATOR_RADIUS {
                    collisions += 1;
                }
            }
        }
        RiskInfo { collisions, risky: collisions > 0 }
    }
}

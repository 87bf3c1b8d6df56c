//! Formation change: robots start on the perimeter of a square and must
//! reach the antipodal point while avoiding each other and a central
//! obstacle. A planar kinematic model with continuous acceleration actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::particle::{block, dist, scaled_continuous, set_block, sub, Physics};
use super::COLLISION_PENALTY;
use crate::error::{EspError, Result};
use crate::game::{validate_step, EnvState, Environment, JointAction, RiskInfo, StepOutcome};
use crate::group::Vec2;
use crate::layout::{Action, ActionLayout, ObservationLayout};

pub const ARRIVAL_BONUS: f64 = 5.0;
pub const EPISODE_STEPS: usize = 50;
const ROBOT_RADIUS: f64 = 0.1;
const OBSTACLE_RADIUS: f64 = 0.25;
const GOAL_RADIUS: f64 = 0.1;
const SQUARE_HALF_SIDE: f64 = 1.0;
const SPAWN_JITTER: f64 = 0.05;
/// Center distance below which a state counts as risky (robot diameter plus
/// a margin, the arena-unit analogue of a 5 cm clearance).
pub const RISKY_DISTANCE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct FormationChange {
    n: usize,
    physics: Physics,
    obs_layout: ObservationLayout,
    global_layout: ObservationLayout,
    act_layout: ActionLayout,
}

// Global state blocks: positions [0, n), velocities [n, 2n), goals [2n, 3n),
// obstacle center 3n.
impl FormationChange {
    pub fn new(n_robots: usize) -> Result<Self> {
        if n_robots != 4 && n_robots != 8 {
            return Err(EspError::invalid(format!("formation change supports 4 or 8 robots, got {n_robots}")));
        }
        let n = n_robots;
        Ok(FormationChange {
            n,
            physics: Physics::particle_default(3.0, 1.0, 1.5),
            // own velocity, own position, goal relative, other robots relative, obstacle relative
            obs_layout: ObservationLayout::geometric(3 + (n - 1) + 1),
            global_layout: ObservationLayout::geometric(3 * n + 1),
            act_layout: ActionLayout::Continuous2d,
        })
    }

    /// Nominal spawn points: square corners, plus edge midpoints for 8 robots.
    pub fn nominal_spawn(&self) -> Vec<Vec2> {
        let h = SQUARE_HALF_SIDE;
        let mut pts = vec![[h, h], [-h, h], [-h, -h], [h, -h]];
        if self.n == 8 {
            pts.extend([[h, 0.0], [0.0, h], [-h, 0.0], [0.0, -h]]);
        }
        pts
    }

    pub fn robot_pos(&self, global: &[f64], i: usize) -> Vec2 {
        block(global, 0, i)
    }

    pub fn goal(&self, global: &[f64], i: usize) -> Vec2 {
        block(global, 2 * self.n, i)
    }

    fn obstacle(&self, global: &[f64]) -> Vec2 {
        block(global, 3 * self.n, 0)
    }

    fn make_state(&self, global: Vec<f64>, t: usize, done: bool) -> EnvState {
        let per_agent_obs = self.observe(&global);
        EnvState { global, per_agent_obs, t, done }
    }

    /// A state with robots at the given positions, at rest, and the
    /// standard antipodal goals.
    pub fn state_from_positions(&self, robots: &[Vec2]) -> Result<EnvState> {
        if robots.len() != self.n {
            return Err(EspError::invalid("expected one position per robot"));
        }
        let mut global = vec![0.0; self.global_layout.len()];
        for (i, (p, nominal)) in robots.iter().zip(self.nominal_spawn()).enumerate() {
            set_block(&mut global, 0, i, *p);
            set_block(&mut global, 2 * self.n, i, [-nominal[0], -nominal[1]]);
        }
        Ok(self.make_state(global, 0, false))
    }

    fn contacts(&self, global: &[f64]) -> usize {
        let obstacle = self.obstacle(global);
        let mut count = 0;
        for i in 0..self.n {
            let p = self.robot_pos(global, i);
            for k in (i + 1)..self.n {
                if dist(&p, &self.robot_pos(global, k)) < 2.0 * ROBOT_RADIUS {
                    count += 1;
                }
            }
            if dist(&p, &obstacle) < ROBOT_RADIUS + OBSTACLE_RADIUS {
                count += 1;
            }
        }
        count
    }

    pub fn distance_cost(&self, global: &[f64]) -> f64 {
        (0..self.n).map(|i| dist(&self.robot_pos(global, i), &self.goal(global, i))).sum()
    }

    pub fn all_arrived(&self, global: &[f64]) -> bool {
        (0..self.n).all(|i| dist(&self.robot_pos(global, i), &self.goal(global, i)) < GOAL_RADIUS)
    }

    /// `−Σ dist(robot, goal) − penalty · #contacts (+ bonus when all arrived)`.
    pub fn reward(&self, global: &[f64]) -> f64 {
        let bonus = if self.all_arrived(global) { ARRIVAL_BONUS } else { 0.0 };
        -self.distance_cost(global) - COLLISION_PENALTY * self.contacts(global) as f64 + bonus
    }
}

impl Environment for FormationChange {
    fn name(&self) -> &str {
        "formation_change"
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
        EPISODE_STEPS
    }

    fn reward_bound(&self) -> f64 {
        let diag = 2.0 * std::f64::consts::SQRT_2 * self.physics.arena_half_width;
        let contacts = (self.n * (self.n - 1) / 2 + self.n) as f64;
        self.n as f64 * diag + COLLISION_PENALTY * contacts + ARRIVAL_BONUS
    }

    fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let robots: Vec<Vec2> = self
            .nominal_spawn()
            .into_iter()
            .map(|p| {
                [
                    p[0] + rng.random_range(-SPAWN_JITTER..SPAWN_JITTER),
                    p[1] + rng.random_range(-SPAWN_JITTER..SPAWN_JITTER),
                ]
            })
            .collect();
        self.state_from_positions(&robots).expect("spawn count matches")
    }

    fn observe(&self, global: &[f64]) -> Vec<Vec<f64>> {
        let obstacle = self.obstacle(global);
        (0..self.n)
            .map(|i| {
                let me = self.robot_pos(global, i);
                let mut obs = Vec::with_capacity(self.obs_layout.len());
                obs.extend_from_slice(&block(global, self.n, i));
                obs.extend_from_slice(&me);
                obs.extend_from_slice(&sub(&self.goal(global, i), &me));
                for k in (0..self.n).filter(|&k| k != i) {
                    obs.extend_from_slice(&sub(&self.robot_pos(global, k), &me));
                }
                obs.extend_from_slice(&sub(&obstacle, &me));
                obs
            })
            .collect()
    }

    fn step(&self, state: &EnvState, joint: &JointAction) -> Result<StepOutcome> {
        validate_step(self, state, joint)?;
        let mut global = state.global.clone();
        for (i, a) in joint.actions().iter().enumerate() {
            let Action::Continuous(u) = a else { unreachable!("validated") };
            let accel = scaled_continuous(*u, self.physics.accel_scale);
            let mut pos = block(&global, 0, i);
            let mut vel = block(&global, self.n, i);
            self.physics.integrate(&mut pos, &mut vel, accel);
            set_block(&mut global, 0, i, pos);
            set_block(&mut global, self.n, i, vel);
        }
        let reward = self.reward(&global);
        let done = self.all_arrived(&global);
        let t = state.t + 1;
        Ok(StepOutcome {
            state: self.make_state(global, t, done),
            reward,
            done,
            truncated: !done && t >= self.max_steps(),
        })
    }

    fn risk(&self, global: &[f64]) -> RiskInfo {
        let mut collisions = 0;
        let mut risky = false;
        for i in 0..self.n {
            for k in (i + 1)..self.n {
                let d = dist(&self.robot_pos(global, i), &self.robot_pos(global, k));
                if d < 2.0 * ROBOT_RADIUS {
                    collisions += 1;
                }
                if d < RISKY_DISTANCE {
                    risky = true;
                }
            }
        }
        RiskInfo { collisions, risky }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{check_reward_invariance, check_transition_equivariance, SymmetrySpec};
    use crate::group::group_by_name;

    #[test]
    fn robot_count_is_validated() {
        assert!(FormationChange::new(4).is_ok());
        assert!(FormationChange::new(8).is_ok());
        assert!(FormationChange::new(6).is_err());
    }

    #[test]
    fn goals_are_antipodal() {
        let env = FormationChange::new(8).unwrap();
        let s = env.reset(1);
        for (i, p) in env.nominal_spawn().iter().enumerate() {
            assert_eq!(env.goal(&s.global, i), [-p[0], -p[1]]);
            let r = env.robot_pos(&s.global, i);
            assert!((r[0] - p[0]).abs() <= SPAWN_JITTER && (r[1] - p[1]).abs() <= SPAWN_JITTER);
        }
        assert_eq!(s.per_agent_obs[0].len(), 22);
    }

    #[test]
    fn robots_at_goals_have_zero_distance_cost() {
        let env = FormationChange::new(4).unwrap();
        let goals: Vec<Vec2> = env.nominal_spawn().iter().map(|p| [-p[0], -p[1]]).collect();
        let s = env.state_from_positions(&goals).unwrap();
        assert_eq!(env.distance_cost(&s.global), 0.0);
        let out = env.step(&s, &JointAction(vec![Action::Continuous([0.0, 0.0]); 4])).unwrap();
        assert_eq!(env.distance_cost(&out.state.global), 0.0);
        assert!(out.done);
        assert_eq!(out.reward, ARRIVAL_BONUS);
        assert!(env.step(&out.state, &JointAction(vec![Action::Continuous([0.0, 0.0]); 4])).is_err());
    }

    #[test]
    fn half_turn_swaps_start_and_goal() {
        let env = FormationChange::new(4).unwrap();
        let c4 = group_by_name("c4").unwrap();
        let spec = SymmetrySpec::for_env(&env, c4.clone()).unwrap();
        let s = env.state_from_positions(&env.nominal_spawn()).unwrap();
        let r180 = c4.by_name("r180").unwrap();
        let moved = spec.transform_state(r180, &s).unwrap();
        for i in 0..4 {
            assert_eq!(env.robot_pos(&moved.global, i), env.goal(&s.global, i));
            assert_eq!(env.goal(&moved.global, i), env.robot_pos(&s.global, i));
        }
        assert_eq!(env.reward(&moved.global), env.reward(&s.global));
    }

    #[test]
    fn risky_states_are_counted() {
        let env = FormationChange::new(4).unwrap();
        let s = env.state_from_positions(&[[0.0, 0.5], [0.2, 0.5], [-1.0, -1.0], [1.0, -1.0]]).unwrap();
        let r = env.risk(&s.global);
        assert!(r.risky && r.collisions == 0);
    }

    #[test]
    fn symmetric_under_c4() {
        let env = FormationChange::new(8).unwrap();
        let spec = SymmetrySpec::for_env(&env, group_by_name("c4").unwrap()).unwrap();
        assert!(check_reward_invariance(&env, &spec, 200, 2).unwrap().passed);
        assert!(check_transition_equivariance(&env, &spec, 200, 2).unwrap().passed);
    }
}

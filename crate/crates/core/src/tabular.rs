//! Small enumerable symmetric games and an exact check that the optimal
//! joint-action value is invariant under the group: `Q*(s, a) = Q*(σ_g s, τ_g a)`.
//!
//! The grid game places agents on a square grid centered at the origin. C_4
//! acts by rotating every agent's coordinates about the center and permuting
//! each agent's move accordingly. Value iteration runs the cooperative
//! (max over joint actions) backup to a tight residual, and the equivalence
//! check compares every `(s, a, g)` triple.

use std::fmt;

use serde::Serialize;

use crate::error::{EspError, Result};
use crate::group::{cyclic_group, Group};
use crate::layout::ActionLayout;

/// Moves `{stay, N, S, E, W}` as grid displacements.
pub const MOVES: [[i32; 2]; 5] = [[0, 0], [0, 1], [0, -1], [1, 0], [-1, 0]];
pub const COLLISION_PENALTY: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 0.9;
const MAX_ITERATIONS: usize = 100_000;

#[derive(Clone, Debug)]
pub struct FiniteGame {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `R[s][a]`.
    pub reward: Vec<f64>,
    /// Row-major deterministic successor `T[s][a]`.
    pub transition: Vec<usize>,
    pub gamma: f64,
    pub group: Group,
    /// `σ_g` per element id.
    pub state_maps: Vec<Vec<usize>>,
    /// `τ_g` per element id.
    pub action_maps: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGameOptions {
    pub grid_side: usize,
    pub n_agents: usize,
    pub gamma: f64,
    /// Extra reward when agent 0 sits in the north-east corner. Breaks the
    /// rotational symmetry; used as a negative control.
    pub corner_bonus: Option<f64>,
}

impl GridGameOptions {
    pub fn new(grid_side: usize, n_agents: usize) -> Self {
        GridGameOptions { grid_side, n_agents, gamma: DEFAULT_GAMMA, corner_bonus: None }
    }
}

struct Grid {
    side: usize,
    half: i32,
    n_agents: usize,
}

impl Grid {
    fn cells(&self) -> usize {
        self.side * self.side
    }

    fn cell(&self, p: [i32; 2]) -> usize {
        ((p[0] + self.half) as usize) + self.side * ((p[1] + self.half) as usize)
    }

    fn coords(&self, cell: usize) -> [i32; 2] {
        [(cell % self.side) as i32 - self.half, (cell / self.side) as i32 - self.half]
    }

    fn decode_state(&self, mut s: usize) -> Vec<[i32; 2]> {
        (0..self.n_agents)
            .map(|_| {
                let c = s % self.cells();
                s /= self.cells();
                self.coords(c)
            })
            .collect()
    }

    fn encode_state(&self, positions: &[[i32; 2]]) -> usize {
        positions.iter().rev().fold(0, |acc, p| acc * self.cells() + self.cell(*p))
    }

    fn decode_action(&self, mut a: usize) -> Vec<usize> {
        (0..self.n_agents)
            .map(|_| {
                let m = a % MOVES.len();
                a /= MOVES.len();
                m
            })
            .collect()
    }

    fn encode_action(&self, moves: &[usize]) -> usize {
        moves.iter().rev().fold(0, |acc, &m| acc * MOVES.len() + m)
    }

    fn clamp(&self, v: i32) -> i32 {
        v.clamp(-self.half, self.half)
    }
}

fn move_layout() -> ActionLayout {
    ActionLayout::Discrete { displacements: MOVES.iter().map(|m| [m[0] as f64, m[1] as f64]).collect() }
}

/// Builds the C_4-symmetric grid game.
pub fn build_grid_symmetry_game(grid_side: usize, n_agents: usize) -> Result<FiniteGame> {
    build_grid_game(GridGameOptions::new(grid_side, n_agents))
}

pub fn build_grid_game(opts: GridGameOptions) -> Result<FiniteGame> {
    if opts.grid_side != 3 && opts.grid_side != 5 {
        return Err(EspError::invalid(format!("grid_side must be 3 or 5, got {}", opts.grid_side)));
    }
    if opts.n_agents != 1 && opts.n_agents != 2 {
        return Err(EspError::invalid(format!("n_agents must be 1 or 2, got {}", opts.n_agents)));
    }
    if !(0.0..1.0).contains(&opts.gamma) {
        return Err(EspError::invalid(format!("gamma must be in [0, 1), got {}", opts.gamma)));
    }
    let grid = Grid { side: opts.grid_side, half: (opts.grid_side / 2) as i32, n_agents: opts.n_agents };
    let n_states = grid.cells().pow(opts.n_agents as u32);
    let n_actions = MOVES.len().pow(opts.n_agents as u32);

    let mut reward = vec![0.0; n_states * n_actions];
    let mut transition = vec![0usize; n_states * n_actions];
    for s in 0..n_states {
        let pos = grid.decode_state(s);
        let mut r: f64 = -pos.iter().map(|p| (p[0].abs() + p[1].abs()) as f64).sum::<f64>();
        if opts.n_agents == 2 && pos[0] == pos[1] {
            r -= COLLISION_PENALTY;
        }
        if let Some(bonus) = opts.corner_bonus {
            if pos[0] == [grid.half, grid.half] {
                r += bonus;
            }
        }
        for a in 0..n_actions {
            let moves = grid.decode_action(a);
            let next: Vec<[i32; 2]> = pos
                .iter()
                .zip(&moves)
                .map(|(p, &m)| [grid.clamp(p[0] + MOVES[m][0]), grid.clamp(p[1] + MOVES[m][1])])
                .collect();
            reward[s * n_actions + a] = r;
            transition[s * n_actions + a] = grid.encode_state(&next);
        }
    }

    let group = cyclic_group(4)?;
    let layout = move_layout();
    let mut state_maps = Vec::new();
    let mut action_maps = Vec::new();
    for g in group.elements() {
        let m = g.linear_rep();
        let rot = |p: [i32; 2]| {
            let v = [p[0] as f64, p[1] as f64];
            [(m[0][0] * v[0] + m[0][1] * v[1]).round() as i32, (m[1][0] * v[0] + m[1][1] * v[1]).round() as i32]
        };
        state_maps.push(
            (0..n_states)
                .map(|s| grid.encode_state(&grid.decode_state(s).into_iter().map(rot).collect::<Vec<_>>()))
                .collect(),
        );
        let perm = layout.permutation(g)?;
        action_maps.push(
            (0..n_actions)
                .map(|a| grid.encode_action(&grid.decode_action(a).iter().map(|&m| perm[m]).collect::<Vec<_>>()))
                .collect(),
        );
    }

    Ok(FiniteGame { n_states, n_actions, reward, transition, gamma: opts.gamma, group, state_maps, action_maps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameInvariantReport {
    pub bijections: bool,
    pub homomorphism: bool,
    /// Max `|R[s][a] − R[σ_g s][τ_g a]|`.
    pub reward_deviation: f64,
    /// Number of `(s, a, g)` with `σ_g(T[s][a]) ≠ T[σ_g s][τ_g a]`.
    pub transition_violations: usize,
}

impl GameInvariantReport {
    pub fn symmetric(&self) -> bool {
        self.bijections && self.homomorphism && self.reward_deviation == 0.0 && self.transition_violations == 0
    }
}

fn is_bijection(map: &[usize]) -> bool {
    let mut seen = vec![false; map.len()];
    map.iter().all(|&x| x < map.len() && !std::mem::replace(&mut seen[x], true))
}

impl FiniteGame {
    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    #[inline]
    pub fn next(&self, s: usize, a: usize) -> usize {
        self.transition[s * self.n_actions + a]
    }

    /// Exhaustively checks the table identities of a symmetric game.
    pub fn check_invariants(&self) -> GameInvariantReport {
        let bijections =
            self.state_maps.iter().all(|m| is_bijection(m)) && self.action_maps.iter().all(|m| is_bijection(m));
        let cayley = self.group.cayley();
        let mut homomorphism = true;
        for g1 in 0..self.group.order() {
            for g2 in 0..self.group.order() {
                let g12 = cayley[g1][g2];
                homomorphism &=
                    (0..self.n_states).all(|s| self.state_maps[g12][s] == self.state_maps[g1][self.state_maps[g2][s]]);
                homomorphism &= (0..self.n_actions)
                    .all(|a| self.action_maps[g12][a] == self.action_maps[g1][self.action_maps[g2][a]]);
            }
        }
        let mut reward_deviation: f64 = 0.0;
        let mut transition_violations = 0;
        for (sigma, tau) in self.state_maps.iter().zip(&self.action_maps) {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    reward_deviation = reward_deviation.max((self.r(s, a) - self.r(sigma[s], tau[a])).abs());
                    if sigma[self.next(s, a)] != self.next(sigma[s], tau[a]) {
                        transition_violations += 1;
                    }
                }
            }
        }
        GameInvariantReport { bijections, homomorphism, reward_deviation, transition_violations }
    }
}

#[derive(Clone, Debug)]
pub struct QTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm Bellman residual of the final sweep.
    pub residual: f64,
    /// Residual after every sweep.
    pub residual_history: Vec<f64>,
}

impl QTable {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn state_value(&self, s: usize) -> f64 {
        self.values[s * self.n_actions..(s + 1) * self.n_actions].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Synchronous Q-iteration with the cooperative backup
/// `Q(s, a) ← R(s, a) + γ max_a' Q(T(s, a), a')`, until the sup-norm change
/// of a sweep is at most `tol`.
pub fn value_iteration(game: &FiniteGame, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(EspError::invalid(format!("tolerance must be positive, got {tol}")));
    }
    if !(0.0..1.0).contains(&game.gamma) {
        return Err(EspError::invalid(format!("gamma must be in [0, 1), got {}", game.gamma)));
    }
    let na = game.n_actions;
    let mut q = vec![0.0; game.n_states * na];
    let mut v = vec![0.0; game.n_states];
    let mut history = Vec::new();
    for iteration in 1..=MAX_ITERATIONS {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let mut residual: f64 = 0.0;
        for s in 0..game.n_states {
            for a in 0..na {
                let idx = s * na + a;
                let updated = game.reward[idx] + game.gamma * v[game.transition[idx]];
                residual = residual.max((updated - q[idx]).abs());
                q[idx] = updated;
            }
        }
        history.push(residual);
        if residual <= tol {
            return Ok(QTable { n_actions: na, values: q, iterations: iteration, residual, residual_history: history });
        }
    }
    Err(EspError::NonConvergence { iterations: MAX_ITERATIONS, residual: history.last().copied().unwrap_or(f64::NAN) })
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceWitness {
    pub state: usize,
    pub action: usize,
    pub element: String,
    pub deviation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub per_element: Vec<(String, f64)>,
    pub witness: Option<EquivalenceWitness>,
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "optimal value equivalence: {} (max |Q(s,a) − Q(σs, τa)| = {:.3e}, tolerance {:.0e})",
            if self.passed { "pass" } else { "FAIL" },
            self.max_deviation,
            self.tolerance
        )?;
        if let Some(w) = &self.witness {
            write!(f, "; witness s={} a={} g={} deviation={:.3e}", w.state, w.action, w.element, w.deviation)?;
        }
        Ok(())
    }
}

/// Max over all `(s, a, g)` of `|Q[s][a] − Q[σ_g s][τ_g a]|`; passes iff ≤ `tol`.
pub fn verify_optimal_value_equivalence(game: &FiniteGame, q: &QTable, tol: f64) -> EquivalenceReport {
    let mut max_deviation: f64 = 0.0;
    let mut witness = None;
    let mut per_element = Vec::new();
    for (g, (sigma, tau)) in game.group.elements().iter().zip(game.state_maps.iter().zip(&game.action_maps)) {
        let mut worst: f64 = 0.0;
        for s in 0..game.n_states {
            for a in 0..game.n_actions {
                let d = (q.q(s, a) - q.q(sigma[s], tau[a])).abs();
                worst = worst.max(d);
                if d > max_deviation {
                    max_deviation = d;
                    witness =
                        Some(EquivalenceWitness { state: s, action: a, element: g.name().to_string(), deviation: d });
                }
            }
        }
        per_element.push((g.name().to_string(), worst));
    }
    let passed = max_deviation <= tol;
    EquivalenceReport {
        max_deviation,
        tolerance: tol,
        passed,
        per_element,
        witness: if passed { None } else { witness },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(side: usize, n: usize) -> Grid {
        Grid { side, half: (side / 2) as i32, n_agents: n }
    }

    #[test]
    fn enumeration_sizes() {
        let g = build_grid_symmetry_game(3, 2).unwrap();
        assert_eq!((g.n_states, g.n_actions), (81, 25));
        let g = build_grid_symmetry_game(5, 1).unwrap();
        assert_eq!((g.n_states, g.n_actions), (25, 5));
        assert!(build_grid_symmetry_game(4, 1).is_err());
        assert!(build_grid_symmetry_game(3, 3).is_err());
    }

    #[test]
    fn collision_at_center_costs_one() {
        let game = build_grid_symmetry_game(3, 2).unwrap();
        let gr = grid(3, 2);
        let s = gr.encode_state(&[[0, 0], [0, 0]]);
        assert_eq!(game.r(s, gr.encode_action(&[0, 0])), -1.0);
        assert_eq!(game.next(s, 0), s);
    }

    #[test]
    fn symmetric_tables_hold_exactly() {
        for (side, n) in [(3, 1), (3, 2), (5, 1), (5, 2)] {
            let report = build_grid_symmetry_game(side, n).unwrap().check_invariants();
            assert!(report.symmetric(), "{side}x{side}, {n} agents: {report:?}");
        }
        let broken =
            build_grid_game(GridGameOptions { corner_bonus: Some(1.0), ..GridGameOptions::new(3, 2) }).unwrap();
        let report = broken.check_invariants();
        assert!(report.reward_deviation > 0.5);
        assert!(report.bijections && report.homomorphism);
    }

    #[test]
    fn myopic_q_equals_reward() {
        let game = build_grid_game(GridGameOptions { gamma: 0.0, ..GridGameOptions::new(3, 2) }).unwrap();
        let q = value_iteration(&game, 1e-12).unwrap();
        assert_eq!(q.values, game.reward);
    }

    #[test]
    fn single_agent_values_match_hand_recursion() {
        let game = build_grid_symmetry_game(3, 1).unwrap();
        let q = value_iteration(&game, 1e-12).unwrap();
        let gr = grid(3, 1);
        let center = gr.encode_state(&[[0, 0]]);
        assert!(q.q(center, 0).abs() < 1e-10);
        // V(1,0) = -1 + γ·0; V(1,1) = -2 + γ·V(1,0); Q((1,1), stay) = -2 + γ·V(1,1).
        let v10 = -1.0;
        let v11 = -2.0 + 0.9 * v10;
        let corner = gr.encode_state(&[[1, 1]]);
        assert!((q.state_value(corner) - v11).abs() < 1e-10);
        assert!((q.q(corner, 0) - (-2.0 + 0.9 * v11)).abs() < 1e-10);
        // The western move from (1, 0) reaches the center.
        let east = gr.encode_state(&[[1, 0]]);
        assert!((q.q(east, 4) - (-1.0)).abs() < 1e-10);
    }

    #[test]
    fn residual_is_monotone_and_within_tolerance() {
        let game = build_grid_symmetry_game(3, 2).unwrap();
        let q = value_iteration(&game, 1e-10).unwrap();
        assert!(q.residual <= 1e-10);
        for w in q.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(value_iteration(&game, 0.0).is_err());
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let game = build_grid_game(GridGameOptions {
            gamma: 0.999_999,
            corner_bonus: Some(10.0),
            ..GridGameOptions::new(3, 1)
        })
        .unwrap();
        match value_iteration(&game, 1e-300) {
            Err(EspError::NonConvergence { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn equivalence_passes_on_symmetric_and_fails_on_broken() {
        let game = build_grid_symmetry_game(3, 2).unwrap();
        let q = value_iteration(&game, 1e-10).unwrap();
        let report = verify_optimal_value_equivalence(&game, &q, 1e-8);
        assert!(report.passed, "{report}");
        assert_eq!(report.per_element[0], ("e".to_string(), 0.0));

        let broken =
            build_grid_game(GridGameOptions { corner_bonus: Some(1.0), ..GridGameOptions::new(3, 2) }).unwrap();
        let q = value_iteration(&broken, 1e-10).unwrap();
        let report = verify_optimal_value_equivalence(&broken, &q, 1e-8);
        assert!(!report.passed);
        assert!(report.witness.is_some());
    }
}

//! Point-mass integrator shared by all particle-world tasks.

use crate::group::Vec2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Physics {
    /// Seconds per step.
    pub dt: f64,
    /// Fraction of velocity lost per step, in `[0, 1)`.
    pub damping: f64,
    pub max_speed: f64,
    /// Acceleration produced by a unit action.
    pub accel_scale: f64,
    pub arena_half_width: f64,
}

impl Physics {
    /// Particle-world defaults: `dt = 0.1`, damping 0.25.
    pub fn particle_default(accel_scale: f64, max_speed: f64, arena_half_width: f64) -> Self {
        Physics { dt: 0.1, damping: 0.25, max_speed, accel_scale, arena_half_width }
    }

    /// Advances one body by one step under `accel` (already scaled).
    ///
    /// Speed is clipped by Euclidean norm and positions are clamped to the
    /// square arena, zeroing the velocity component that hit the wall. Both
    /// operations commute with the symmetries of the square.
    pub fn integrate(&self, pos: &mut Vec2, vel: &mut Vec2, accel: Vec2) {
        for k in 0..2 {
            vel[k] = vel[k] * (1.0 - self.damping) + accel[k] * self.dt;
        }
        let speed = norm(vel);
        if speed > self.max_speed {
            let s = self.max_speed / speed;
            vel[0] *= s;
            vel[1] *= s;
        }
        for k in 0..2 {
            pos[k] += vel[k] * self.dt;
            if pos[k] > self.arena_half_width {
                pos[k] = self.arena_half_width;
                vel[k] = 0.0;
            } else if pos[k] < -self.arena_half_width {
                pos[k] = -self.arena_half_width;
                vel[k] = 0.0;
            }
        }
    }
}

#[inline]
pub fn norm(v: &Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

#[inline]
pub fn dist(a: &Vec2, b: &Vec2) -> f64 {
    norm(&[a[0] - b[0], a[1] - b[1]])
}

#[inline]
pub fn sub(a: &Vec2, b: &Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Reads the `i`-th 2D block starting at block offset `base`.
#[inline]
pub(crate) fn block(v: &[f64], base: usize, i: usize) -> Vec2 {
    let o = 2 * (base + i);
    [v[o], v[o + 1]]
}

#[inline]
pub(crate) fn set_block(v: &mut [f64], base: usize, i: usize, x: Vec2) {
    let o = 2 * (base + i);
    v[o] = x[0];
    v[o + 1] = x[1];
}

/// Unit action vector clipped to norm 1, then scaled.
pub(crate) fn scaled_continuous(a: Vec2, scale: f64) -> Vec2 {
    let n = norm(&a);
    let s = if n > 1.0 { scale / n } else { scale };
    [a[0] * s, a[1] * s]
}

/// Kinetic energy `½ Σ |v|²` of the given velocity blocks.
pub fn kinetic_energy(global: &[f64], vel_base: usize, count: usize) -> f64 {
    (0..count)
        .map(|i| {
            let v = block(global, vel_base, i);
            0.5 * (v[0] * v[0] + v[1] * v[1])
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speed_clip_and_clamp() {
        let p = Physics::particle_default(5.0, 1.0, 1.0);
        let mut pos = [0.95, 0.0];
        let mut vel = [3.0, 0.0];
        p.integrate(&mut pos, &mut vel, [0.0, 0.0]);
        assert_eq!(pos, [1.0, 0.0]);
        assert_eq!(vel, [0.0, 0.0]);

        let mut pos = [0.0, 0.0];
        let mut vel = [0.6, 0.8];
        p.integrate(&mut pos, &mut vel, [10.0, 0.0]);
        assert!((norm(&vel) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn damping_dissipates_energy() {
        let p = Physics::particle_default(5.0, 2.0, 2.0);
        let mut pos = [0.0, 0.0];
        let mut vel = [0.7, -0.4];
        let mut prev = 0.5 * (vel[0] * vel[0] + vel[1] * vel[1]);
        for _ in 0..50 {
            p.integrate(&mut pos, &mut vel, [0.0, 0.0]);
            let e = 0.5 * (vel[0] * vel[0] + vel[1] * vel[1]);
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn continuous_actions_clip_to_unit_norm() {
        assert_eq!(scaled_continuous([0.5, 0.0], 2.0), [1.0, 0.0]);
        let v = scaled_continuous([3.0, 4.0], 2.0);
        assert!((norm(&v) - 2.0).abs() < 1e-12);
    }
}

//! Symmetry-prior exploitation for cooperative multi-agent reinforcement
//! learning: finite planar symmetry groups acting on particle-world tasks,
//! exact checkers for reward invariance and transition equivariance, a
//! tabular optimal-value-equivalence oracle, and a parameter-sharing MAPPO
//! trainer extended with symmetry augmentation and consistency losses.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod envs;
pub mod error;
pub mod esp;
pub mod game;
pub mod gradcheck;
pub mod group;
pub mod harness;
pub mod layout;
pub mod mappo;
pub mod nn;
pub mod tabular;

pub use error::{EspError, Result};

//! Declarative observation and action layouts, and the state/action maps
//! `L_g` and `K_g` they induce for a group element.

use crate::error::{EspError, Result};
use crate::group::{GroupElement, Vec2};

/// One tagged slice of an observation or state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slice {
    /// A planar vector (position, velocity, relative offset) that transforms
    /// with the element's 2×2 representation.
    Geometric2d,
    /// `k` scalars left unchanged by every element.
    Invariant(usize),
}

impl Slice {
    pub fn len(&self) -> usize {
        match self {
            Slice::Geometric2d => 2,
            Slice::Invariant(k) => *k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationLayout {
    slices: Vec<Slice>,
    len: usize,
}

impl ObservationLayout {
    pub fn new(slices: Vec<Slice>) -> Self {
        let len = slices.iter().map(Slice::len).sum();
        ObservationLayout { slices, len }
    }

    /// `blocks` consecutive geometric 2D slices.
    pub fn geometric(blocks: usize) -> Self {
        Self::new(vec![Slice::Geometric2d; blocks])
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn check_len(&self, actual: usize) -> Result<()> {
        if actual != self.len {
            return Err(EspError::LayoutMismatch { expected: self.len, actual });
        }
        Ok(())
    }

    /// Writes `L_g[state]` into `out` (same length as `state`).
    pub fn apply_into(&self, g: &GroupElement, state: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len(state.len())?;
        self.check_len(out.len())?;
        let mut offset = 0;
        for slice in &self.slices {
            match slice {
                Slice::Geometric2d => {
                    let v = g.apply_vec2(&[state[offset], state[offset + 1]]);
                    out[offset] = v[0];
                    out[offset + 1] = v[1];
                }
                Slice::Invariant(k) => out[offset..offset + k].copy_from_slice(&state[offset..offset + k]),
            }
            offset += slice.len();
        }
        Ok(())
    }

    pub fn apply(&self, g: &GroupElement, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; state.len()];
        self.apply_into(g, state, &mut out)?;
        Ok(out)
    }
}

/// An individual agent's action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec2),
}

impl Action {
    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<Vec2> {
        match self {
            Action::Continuous(v) => Some(*v),
            Action::Discrete(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionLayout {
    /// `k` discrete actions; each has a canonical planar displacement
    /// (the zero vector for "stay").
    Discrete { displacements: Vec<Vec2> },
    /// A planar force/acceleration vector.
    Continuous2d,
}

/// Tolerance for matching a transformed displacement to an action direction.
const DISPLACEMENT_TOL: f64 = 1e-9;

impl ActionLayout {
    /// The particle-world move set `{no-op, right, left, up, down}`.
    pub fn five_moves() -> Self {
        ActionLayout::Discrete { displacements: vec![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] }
    }

    pub fn num_discrete(&self) -> Option<usize> {
        match self {
            ActionLayout::Discrete { displacements } => Some(displacements.len()),
            ActionLayout::Continuous2d => None,
        }
    }

    pub fn validate(&self, action: &Action) -> Result<()> {
        match (self, action) {
            (ActionLayout::Discrete { displacements }, Action::Discrete(a)) => {
                if *a >= displacements.len() {
                    return Err(EspError::invalid(format!(
                        "discrete action {a} out of range 0..{}",
                        displacements.len()
                    )));
                }
                Ok(())
            }
            (ActionLayout::Continuous2d, Action::Continuous(v)) => {
                if !(v[0].is_finite() && v[1].is_finite()) {
                    return Err(EspError::invalid("continuous action must be finite"));
                }
                Ok(())
            }
            _ => Err(EspError::invalid(format!("action {action:?} does not match layout kind"))),
        }
    }

    /// The permutation `a ↦ K_g[a]` of a discrete layout, derived by
    /// transforming each displacement with `g` and matching it exactly.
    pub fn permutation(&self, g: &GroupElement) -> Result<Vec<usize>> {
        let ActionLayout::Discrete { displacements } = self else {
            return Err(EspError::invalid("continuous layouts have no action permutation"));
        };
        let mut perm = Vec::with_capacity(displacements.len());
        for d in displacements {
            let moved = g.apply_vec2(d);
            let target = displacements
                .iter()
                .position(|e| (e[0] - moved[0]).abs() < DISPLACEMENT_TOL && (e[1] - moved[1]).abs() < DISPLACEMENT_TOL)
                .ok_or_else(|| {
                    EspError::invalid(format!("element `{}` maps displacement {d:?} outside the action set", g.name()))
                })?;
            perm.push(target);
        }
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(EspError::invalid(format!("element `{}` does not permute the action set", g.name())));
            }
        }
        Ok(perm)
    }

    /// `K_g[action]`.
    pub fn apply(&self, g: &GroupElement, action: &Action) -> Result<Action> {
        self.validate(action)?;
        match action {
            Action::Discrete(a) => Ok(Action::Discrete(self.permutation(g)?[*a])),
            Action::Continuous(v) => Ok(Action::Continuous(g.apply_vec2(v))),
        }
    }
}

/// `L_g[state]` under `layout`.
pub fn apply_state_transform(g: &GroupElement, state: &[f64], layout: &ObservationLayout) -> Result<Vec<f64>> {
    layout.apply(g, state)
}

/// `K_g[action]` under `layout`.
pub fn apply_action_transform(g: &GroupElement, action: &Action, layout: &ActionLayout) -> Result<Action> {
    layout.apply(g, action)
}

/// Pulls a logit vector back through an action permutation: the returned
/// vector assigns to action `a` the logit of `perm[a]`, i.e. `q(a) = p(K_g[a])`.
pub fn pull_back_logits(perm: &[usize], logits: &[f64]) -> Vec<f64> {
    perm.iter().map(|&p| logits[p]).collect()
}

/// The pair `h = (L_g, K_g)` for one element and an environment's layouts.
#[derive(Clone, Copy, Debug)]
pub struct TransformPair<'a> {
    pub element: &'a GroupElement,
    pub obs_layout: &'a ObservationLayout,
    pub act_layout: &'a ActionLayout,
}

impl TransformPair<'_> {
    pub fn state(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.obs_layout.apply(self.element, state)
    }

    pub fn action(&self, action: &Action) -> Result<Action> {
        self.act_layout.apply(self.element, action)
    }
}

//! Cooperative Markov game interface, the transition/trajectory data model,
//! the symmetry attachment for an environment, and sampling-based checkers
//! for reward invariance and transition equivariance.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{EspError, Result};
use crate::group::{Group, GroupElement};
use crate::layout::{Action, ActionLayout, ObservationLayout};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    /// Full simulator state, laid out per the environment's global layout.
    pub global: Vec<f64>,
    /// One observation per agent, laid out per the observation layout.
    pub per_agent_obs: Vec<Vec<f64>>,
    /// Steps taken in the current episode.
    pub t: usize,
    /// Set once the episode has terminated (not on truncation).
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointAction(pub Vec<Action>);

impl JointAction {
    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// True termination.
    pub done: bool,
    /// Episode hit the step limit without terminating.
    pub truncated: bool,
}

/// Safety statistics of a single global state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RiskInfo {
    pub collisions: usize,
    pub risky: bool,
}

/// A deterministic cooperative Markov game with a shared team reward.
///
/// Environments are stateless: the episode lives in [`EnvState`], so the
/// same instance can be stepped from arbitrary (e.g. transformed) states.
pub trait Environment: Send + Sync {
    fn name(&self) -> &str;
    fn n_agents(&self) -> usize;
    fn obs_layout(&self) -> &ObservationLayout;
    fn global_layout(&self) -> &ObservationLayout;
    fn action_layout(&self) -> &ActionLayout;
    fn max_steps(&self) -> usize;
    /// Bound on `|r|` for a single step.
    fn reward_bound(&self) -> f64;

    fn is_stochastic(&self) -> bool {
        false
    }

    /// Samples an initial state; identical seeds give bit-identical states.
    fn reset(&self, seed: u64) -> EnvState;

    /// Builds every agent's observation from a global state.
    fn observe(&self, global: &[f64]) -> Vec<Vec<f64>>;

    fn step(&self, state: &EnvState, joint: &JointAction) -> Result<StepOutcome>;

    fn risk(&self, global: &[f64]) -> RiskInfo;

    /// Group names this environment is symmetric under.
    fn supported_groups(&self) -> &'static [&'static str] {
        &["c4", "d4"]
    }

    fn obs_dim(&self) -> usize {
        self.obs_layout().len()
    }

    fn global_dim(&self) -> usize {
        self.global_layout().len()
    }
}

/// Shared precondition checks for [`Environment::step`].
pub fn validate_step(env: &dyn Environment, state: &EnvState, joint: &JointAction) -> Result<()> {
    if state.done {
        return Err(EspError::invalid("cannot step an environment from a terminated state"));
    }
    if state.t >= env.max_steps() {
        return Err(EspError::invalid("cannot step past the episode step limit"));
    }
    env.global_layout().check_len(state.global.len())?;
    if joint.len() != env.n_agents() {
        return Err(EspError::invalid(format!(
            "joint action has {} entries for {} agents",
            joint.len(),
            env.n_agents()
        )));
    }
    for a in joint.actions() {
        env.action_layout().validate(a)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub joint_action: JointAction,
    /// `log π_old(aⁱ | oⁱ)` per agent, at collection (or augmentation) time.
    pub behavior_log_probs: Vec<f64>,
    /// Critic prediction `V(s)` at collection (or augmentation) time.
    pub value: f64,
    pub reward: f64,
    pub next_state: EnvState,
    pub done: bool,
    pub truncated: bool,
    pub is_augmented: bool,
    /// Id of the group element that produced this transition, if augmented.
    pub source_element: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Undiscounted sum of the rewards in `transitions`.
    pub episode_return: f64,
    /// `V(s_T)` for the state after the last transition when it did not
    /// terminate; zero otherwise.
    pub bootstrap_value: f64,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>, bootstrap_value: f64) -> Self {
        let episode_return = transitions.iter().map(|t| t.reward).sum();
        Trajectory { transitions, episode_return, bootstrap_value }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// A group attached to an environment through its layouts.
#[derive(Clone, Debug)]
pub struct SymmetrySpec {
    pub group: Group,
    pub obs_layout: ObservationLayout,
    pub act_layout: ActionLayout,
    pub global_layout: ObservationLayout,
    /// Cached `K_g` permutations per element id (discrete layouts only).
    perms: Vec<Option<Vec<usize>>>,
}

impl SymmetrySpec {
    pub fn new(
        group: Group,
        obs_layout: ObservationLayout,
        act_layout: ActionLayout,
        global_layout: ObservationLayout,
    ) -> Result<Self> {
        let perms = group
            .elements()
            .iter()
            .map(|g| match act_layout {
                ActionLayout::Discrete { .. } => act_layout.permutation(g).map(Some),
                ActionLayout::Continuous2d => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SymmetrySpec { group, obs_layout, act_layout, global_layout, perms })
    }

    /// The `SymmetrySpec` of `env` under the named group (`"c4"`, `"d4"`, ...).
    pub fn for_env(env: &dyn Environment, group: Group) -> Result<Self> {
        Self::new(group, env.obs_layout().clone(), env.action_layout().clone(), env.global_layout().clone())
    }

    /// Verifies that the layouts fit `env`.
    pub fn check_env(&self, env: &dyn Environment) -> Result<()> {
        if self.obs_layout.len() != env.obs_dim() {
            return Err(EspError::LayoutMismatch { expected: env.obs_dim(), actual: self.obs_layout.len() });
        }
        if self.global_layout.len() != env.global_dim() {
            return Err(EspError::LayoutMismatch { expected: env.global_dim(), actual: self.global_layout.len() });
        }
        if &self.act_layout != env.action_layout() {
            return Err(EspError::invalid("action layout does not match the environment"));
        }
        Ok(())
    }

    pub fn action_permutation(&self, g: &GroupElement) -> Option<&[usize]> {
        self.perms.get(g.id()).and_then(|p| p.as_deref())
    }

    pub fn transform_obs(&self, g: &GroupElement, obs: &[f64]) -> Result<Vec<f64>> {
        self.obs_layout.apply(g, obs)
    }

    pub fn transform_global(&self, g: &GroupElement, global: &[f64]) -> Result<Vec<f64>> {
        self.global_layout.apply(g, global)
    }

    pub fn transform_action(&self, g: &GroupElement, a: &Action) -> Result<Action> {
        match (a, self.action_permutation(g)) {
            (Action::Discrete(i), Some(perm)) => perm
                .get(*i)
                .map(|&p| Action::Discrete(p))
                .ok_or_else(|| EspError::invalid(format!("discrete action {i} out of range"))),
            _ => self.act_layout.apply(g, a),
        }
    }

    pub fn transform_state(&self, g: &GroupElement, s: &EnvState) -> Result<EnvState> {
        Ok(EnvState {
            global: self.transform_global(g, &s.global)?,
            per_agent_obs: s.per_agent_obs.iter().map(|o| self.transform_obs(g, o)).collect::<Result<_>>()?,
            t: s.t,
            done: s.done,
        })
    }

    pub fn transform_joint(&self, g: &GroupElement, joint: &JointAction) -> Result<JointAction> {
        joint.actions().iter().map(|a| self.transform_action(g, a)).collect::<Result<Vec<_>>>().map(JointAction)
    }
}

pub fn random_action(layout: &ActionLayout, rng: &mut impl Rng) -> Action {
    match layout {
        ActionLayout::Discrete { displacements } => Action::Discrete(rng.random_range(0..displacements.len())),
        ActionLayout::Continuous2d => Action::Continuous([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]),
    }
}

pub fn random_joint_action(env: &dyn Environment, rng: &mut impl Rng) -> JointAction {
    JointAction((0..env.n_agents()).map(|_| random_action(env.action_layout(), rng)).collect())
}

/// Samples `n` reachable `(s, a)` pairs by rolling out a uniform-random
/// policy from random resets.
pub fn sample_reachable_pairs(env: &dyn Environment, n: usize, seed: u64) -> Result<Vec<(EnvState, JointAction)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let mut state = env.reset(rng.random());
        loop {
            let joint = random_joint_action(env, &mut rng);
            let out = env.step(&state, &joint)?;
            pairs.push((state, joint));
            if pairs.len() == n || out.done || out.truncated {
                break;
            }
            state = out.state;
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub element: String,
    pub sample: usize,
    pub state: Vec<f64>,
    pub joint_action: Vec<String>,
    pub deviation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub check: String,
    pub env: String,
    pub num_samples: usize,
    /// `(element name, max deviation)` for each non-identity element checked.
    pub per_element: Vec<(String, f64)>,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub witness: Option<Witness>,
}

impl fmt::Display for InvarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} on {}: {} (max deviation {:.3e}, tolerance {:.0e}, {} samples)",
            self.check,
            self.env,
            if self.passed { "pass" } else { "FAIL" },
            self.max_deviation,
            self.tolerance,
            self.num_samples
        )?;
        for (name, dev) in &self.per_element {
            writeln!(f, "    {name:<10} {dev:.3e}")?;
        }
        if let Some(w) = &self.witness {
            writeln!(
                f,
                "    witness: g={} sample={} deviation={:.3e} a=[{}]",
                w.element,
                w.sample,
                w.deviation,
                w.joint_action.join(", ")
            )?;
        }
        Ok(())
    }
}

fn describe_joint(joint: &JointAction) -> Vec<String> {
    joint
        .actions()
        .iter()
        .map(|a| match a {
            Action::Discrete(i) => i.to_string(),
            Action::Continuous(v) => format!("({:.4}, {:.4})", v[0], v[1]),
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const REWARD_TOLERANCE: f64 = 1e-9;
pub const TRANSITION_TOLERANCE: f64 = 1e-6;

fn run_check(
    check: &str,
    env: &dyn Environment,
    spec: &SymmetrySpec,
    num_samples: usize,
    seed: u64,
    tolerance: f64,
    deviation: impl Fn(&EnvState, &JointAction, &StepOutcome, &GroupElement) -> Result<f64>,
) -> Result<InvarianceReport> {
    if num_samples == 0 {
        return Err(EspError::invalid("num_samples must be at least 1"));
    }
    spec.check_env(env)?;
    let pairs = sample_reachable_pairs(env, num_samples, seed)?;
    let outcomes = pairs.iter().map(|(s, a)| env.step(s, a)).collect::<Result<Vec<_>>>()?;
    let mut per_element = Vec::new();
    let mut witness: Option<Witness> = None;
    let mut max_deviation: f64 = 0.0;
    for g in spec.group.non_identity() {
        let mut worst: f64 = 0.0;
        for (i, ((s, a), out)) in pairs.iter().zip(&outcomes).enumerate() {
            let d = deviation(s, a, out, g)?;
            if d > worst {
                worst = d;
            }
            if d > max_deviation {
                max_deviation = d;
                witness = Some(Witness {
                    element: g.name().to_string(),
                    sample: i,
                    state: s.global.clone(),
                    joint_action: describe_joint(a),
                    deviation: d,
                });
            }
        }
        per_element.push((g.name().to_string(), worst));
    }
    let passed = max_deviation <= tolerance;
    Ok(InvarianceReport {
        check: check.to_string(),
        env: env.name().to_string(),
        num_samples,
        per_element,
        max_deviation,
        tolerance,
        passed,
        witness: if passed { None } else { witness },
    })
}

/// Max over sampled reachable `(s, a)` and every non-identity `g` of
/// `|R(s, a) − R(L_g[s], K_g[a])|`; passes iff ≤ 1e-9.
pub fn check_reward_invariance(
    env: &dyn Environment,
    spec: &SymmetrySpec,
    num_samples: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    run_check("reward invariance", env, spec, num_samples, seed, REWARD_TOLERANCE, |s, a, out, g| {
        let moved = env.step(&spec.transform_state(g, s)?, &spec.transform_joint(g, a)?)?;
        Ok((out.reward - moved.reward).abs())
    })
}

/// Max over sampled `(s, a)` and non-identity `g` of `‖L_g[s′] − s″‖∞`
/// where `s′ = T(s, a)` and `s″ = T(L_g[s], K_g[a])`; passes iff ≤ 1e-6.
/// Both the global state and every agent observation are compared.
pub fn check_transition_equivariance(
    env: &dyn Environment,
    spec: &SymmetrySpec,
    num_samples: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    if env.is_stochastic() {
        return Err(EspError::UnsupportedCheck(format!(
            "`{}` has stochastic dynamics; only deterministic next-state equivariance is checked",
            env.name()
        )));
    }
    run_check("transition equivariance", env, spec, num_samples, seed, TRANSITION_TOLERANCE, |s, a, out, g| {
        let moved = env.step(&spec.transform_state(g, s)?, &spec.transform_joint(g, a)?)?;
        let expected = spec.transform_state(g, &out.state)?;
        let mut d = max_abs_diff(&expected.global, &moved.state.global);
        for (x, y) in expected.per_agent_obs.iter().zip(&moved.state.per_agent_obs) {
            d = d.max(max_abs_diff(x, y));
        }
        if moved.done != out.done {
            d = f64::INFINITY;
        }
        Ok(d)
    })
}

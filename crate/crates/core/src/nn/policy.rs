//! Actor and critic networks built on [`Mlp`].

use std::ops::Range;

use rand::Rng;

use super::dist::{Categorical, DiagGaussian, GaussianGrad, LOG_STD_MAX, LOG_STD_MIN};
use super::mlp::{Mlp, MlpCache};
use super::params::ParameterVector;
use crate::error::{EspError, Result};
use crate::layout::Action;

pub const POLICY_OUTPUT_GAIN: f64 = 0.01;
pub const VALUE_OUTPUT_GAIN: f64 = 1.0;
pub const INITIAL_LOG_STD: f64 = 0.0;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionHead {
    Categorical {
        n_actions: usize,
    },
    /// State-independent log-std shared across observations.
    Gaussian {
        dim: usize,
    },
}

/// An action distribution produced by the actor.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyOutput {
    Categorical(Categorical),
    Gaussian(DiagGaussian),
}

/// Gradient of a scalar w.r.t. a [`PolicyOutput`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputGrad {
    Logits(Vec<f64>),
    Gaussian(GaussianGrad),
}

impl OutputGrad {
    pub fn scale(&mut self, s: f64) {
        match self {
            OutputGrad::Logits(g) => g.iter_mut().for_each(|v| *v *= s),
            OutputGrad::Gaussian(g) => g.mean.iter_mut().chain(g.log_std.iter_mut()).for_each(|v| *v *= s),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &OutputGrad, s: f64) -> Result<()> {
        match (self, other) {
            (OutputGrad::Logits(a), OutputGrad::Logits(b)) if a.len() == b.len() => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
            }
            (OutputGrad::Gaussian(a), OutputGrad::Gaussian(b)) if a.mean.len() == b.mean.len() => {
                a.mean.iter_mut().zip(&b.mean).for_each(|(x, y)| *x += s * y);
                a.log_std.iter_mut().zip(&b.log_std).for_each(|(x, y)| *x += s * y);
            }
            _ => return Err(EspError::invalid("mismatched output gradients")),
        }
        Ok(())
    }
}

impl PolicyOutput {
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (PolicyOutput::Categorical(c), Action::Discrete(a)) => c.log_prob(*a),
            (PolicyOutput::Gaussian(g), Action::Continuous(v)) => g.log_prob(v),
            _ => Err(EspError::invalid("action kind does not match policy head")),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            PolicyOutput::Categorical(c) => c.entropy(),
            PolicyOutput::Gaussian(g) => g.entropy(),
        }
    }

    /// KL(self ‖ other).
    pub fn kl(&self, other: &PolicyOutput) -> Result<f64> {
        match (self, other) {
            (PolicyOutput::Categorical(a), PolicyOutput::Categorical(b)) => a.kl(b),
            (PolicyOutput::Gaussian(a), PolicyOutput::Gaussian(b)) => a.kl(b),
            _ => Err(EspError::invalid("KL between different distribution families")),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Action {
        match self {
            PolicyOutput::Categorical(c) => Action::Discrete(c.sample(rng)),
            PolicyOutput::Gaussian(g) => {
                let s = g.sample(rng);
                Action::Continuous([s[0], s[1]])
            }
        }
    }

    /// Deterministic action: argmax or mean.
    pub fn mode(&self) -> Action {
        match self {
            PolicyOutput::Categorical(c) => Action::Discrete(c.mode()),
            PolicyOutput::Gaussian(g) => Action::Continuous([g.mean()[0], g.mean()[1]]),
        }
    }

    pub fn grad_log_prob(&self, action: &Action) -> Result<OutputGrad> {
        match (self, action) {
            (PolicyOutput::Categorical(c), Action::Discrete(a)) => Ok(OutputGrad::Logits(c.grad_log_prob(*a)?)),
            (PolicyOutput::Gaussian(g), Action::Continuous(v)) => Ok(OutputGrad::Gaussian(g.grad_log_prob(v)?)),
            _ => Err(EspError::invalid("action kind does not match policy head")),
        }
    }

    pub fn grad_entropy(&self) -> OutputGrad {
        match self {
            PolicyOutput::Categorical(c) => OutputGrad::Logits(c.grad_entropy()),
            PolicyOutput::Gaussian(g) => OutputGrad::Gaussian(g.grad_entropy()),
        }
    }

    /// Gradients of KL(self ‖ other) w.r.t. (self, other).
    pub fn grad_kl(&self, other: &PolicyOutput) -> Result<(OutputGrad, OutputGrad)> {
        match (self, other) {
            (PolicyOutput::Categorical(a), PolicyOutput::Categorical(b)) => {
                let (x, y) = a.grad_kl(b)?;
                Ok((OutputGrad::Logits(x), OutputGrad::Logits(y)))
            }
            (PolicyOutput::Gaussian(a), PolicyOutput::Gaussian(b)) => {
                let (x, y) = a.grad_kl(b)?;
                Ok((OutputGrad::Gaussian(x), OutputGrad::Gaussian(y)))
            }
            _ => Err(EspError::invalid("KL between different distribution families")),
        }
    }
}

/// Shared-parameter policy network: one θ serves every agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    mlp: Mlp,
    head: ActionHead,
    log_std: Option<Range<usize>>,
    pub params: ParameterVector,
}

impl Actor {
    /// Zero-initialized actor; call [`Actor::init`] for orthogonal weights.
    pub fn zeros(obs_dim: usize, hidden: &[usize], head: ActionHead) -> Result<Self> {
        let out = match head {
            ActionHead::Categorical { n_actions } => n_actions,
            ActionHead::Gaussian { dim } => dim,
        };
        if out == 0 {
            return Err(EspError::invalid("policy head needs at least one output"));
        }
        let mut params = ParameterVector::new();
        let sizes: Vec<usize> = std::iter::once(obs_dim).chain(hidden.iter().copied()).chain([out]).collect();
        let mlp = Mlp::register(&mut params, "actor", &sizes)?;
        let log_std = match head {
            ActionHead::Gaussian { dim } => Some(params.register("actor/log_std", dim)),
            ActionHead::Categorical { .. } => None,
        };
        Ok(Actor { mlp, head, log_std, params })
    }

    pub fn new(obs_dim: usize, hidden: &[usize], head: ActionHead, rng: &mut impl Rng) -> Result<Self> {
        let mut actor = Self::zeros(obs_dim, hidden, head)?;
        actor.init(rng);
        Ok(actor)
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.mlp.init_orthogonal(self.params.values_mut(), POLICY_OUTPUT_GAIN, rng);
        if let Some(r) = self.log_std.clone() {
            self.params.values_mut()[r].fill(INITIAL_LOG_STD);
        }
    }

    pub fn head(&self) -> ActionHead {
        self.head
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn output_from(&self, values: &[f64], raw: &[f64]) -> Result<PolicyOutput> {
        match self.head {
            ActionHead::Categorical { .. } => Ok(PolicyOutput::Categorical(Categorical::new(raw)?)),
            ActionHead::Gaussian { .. } => {
                let r = self.log_std.clone().expect("gaussian head registers log-std");
                Ok(PolicyOutput::Gaussian(DiagGaussian::new(raw, &values[r])?))
            }
        }
    }

    pub fn dist(&self, obs: &[f64]) -> Result<PolicyOutput> {
        self.dist_with(self.params.values(), obs)
    }

    /// Evaluates the policy with an explicit parameter vector.
    pub fn dist_with(&self, values: &[f64], obs: &[f64]) -> Result<PolicyOutput> {
        let raw = self.mlp.forward(values, obs)?;
        self.output_from(values, &raw)
    }

    pub fn forward_cached(&self, obs: &[f64], cache: &mut MlpCache) -> Result<PolicyOutput> {
        let raw = self.mlp.forward_cached(self.params.values(), obs, cache)?.to_vec();
        self.output_from(self.params.values(), &raw)
    }

    /// Accumulates parameter gradients for an output gradient from the
    /// forward pass recorded in `cache`.
    pub fn backward(&self, cache: &MlpCache, d_out: &OutputGrad, grad: &mut [f64]) -> Result<()> {
        match (self.head, d_out) {
            (ActionHead::Categorical { .. }, OutputGrad::Logits(g)) => {
                self.mlp.backward(self.params.values(), cache, g, grad)
            }
            (ActionHead::Gaussian { .. }, OutputGrad::Gaussian(g)) => {
                self.mlp.backward(self.params.values(), cache, &g.mean, grad)?;
                let r = self.log_std.clone().expect("gaussian head registers log-std");
                for (k, idx) in r.enumerate() {
                    let raw = self.params.values()[idx];
                    if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                        grad[idx] += g.log_std[k];
                    }
                }
                Ok(())
            }
            _ => Err(EspError::invalid("output gradient does not match policy head")),
        }
    }
}

/// Centralized critic over the global state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    mlp: Mlp,
    pub params: ParameterVector,
}

impl Critic {
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut params = ParameterVector::new();
        let sizes: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).chain([1]).collect();
        let mlp = Mlp::register(&mut params, "critic", &sizes)?;
        Ok(Critic { mlp, params })
    }

    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut critic = Self::zeros(input_dim, hidden)?;
        critic.mlp.init_orthogonal(critic.params.values_mut(), VALUE_OUTPUT_GAIN, rng);
        Ok(critic)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.mlp.forward(self.params.values(), state)?[0])
    }

    pub fn value_with(&self, values: &[f64], state: &[f64]) -> Result<f64> {
        Ok(self.mlp.forward(values, state)?[0])
    }

    pub fn forward_cached(&self, state: &[f64], cache: &mut MlpCache) -> Result<f64> {
        Ok(self.mlp.forward_cached(self.params.values(), state, cache)?[0])
    }

    pub fn backward(&self, cache: &MlpCache, d_value: f64, grad: &mut [f64]) -> Result<()> {
        self.mlp.backward(self.params.values(), cache, &[d_value], grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut actor = Actor::new(3, &[5], ActionHead::Gaussian { dim: 2 }, &mut rng).unwrap();
        actor.params.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        let obs = [0.2, -0.4, 0.9];
        let action = Action::Continuous([0.5, -0.2]);
        let mut cache = MlpCache::default();
        let out = actor.forward_cached(&obs, &mut cache).unwrap();
        let mut grad = vec![0.0; actor.params.len()];
        actor.backward(&cache, &out.grad_log_prob(&action).unwrap(), &mut grad).unwrap();
        let h = 1e-5;
        let mut vals = actor.params.values().to_vec();
        for k in 0..vals.len() {
            let orig = vals[k];
            vals[k] = orig + h;
            let up = actor.dist_with(&vals, &obs).unwrap().log_prob(&action).unwrap();
            vals[k] = orig - h;
            let down = actor.dist_with(&vals, &obs).unwrap().log_prob(&action).unwrap();
            vals[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn one_parameter_set_serves_every_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = Actor::new(4, &DEFAULT_HIDDEN, ActionHead::Categorical { n_actions: 5 }, &mut rng).unwrap();
        let names: Vec<&str> = actor.params.registry().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["actor/l0/w", "actor/l0/b", "actor/l1/w", "actor/l1/b", "actor/l2/w", "actor/l2/b"]);
        let obs = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(actor.dist(&obs).unwrap(), actor.dist_with(actor.params.values(), &obs).unwrap());
    }

    #[test]
    fn fresh_policy_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = Actor::new(6, &DEFAULT_HIDDEN, ActionHead::Categorical { n_actions: 5 }, &mut rng).unwrap();
        let out = actor.dist(&[1.0, -1.0, 0.5, 0.2, 0.0, 0.3]).unwrap();
        assert!((out.entropy() - 5f64.ln()).abs() < 1e-2);
    }
}

//! Multi-agent PPO with a shared actor and a centralized critic: rollout
//! collection, generalized advantage estimation, and the clipped-surrogate
//! update.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EspError, Result};
use crate::game::{EnvState, Environment, JointAction, Trajectory, Transition};
use crate::layout::{Action, ActionLayout};
use crate::nn::{ActionHead, Actor, Adam, Critic, MlpCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 10,
            minibatches: 4,
            lr: 3e-4,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            n_envs: 8,
            horizon: 200,
            hidden: vec![64, 64],
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EspError::invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.n_envs == 0 || self.horizon == 0 {
            return bad("epochs, minibatches, n_envs and horizon must be at least 1");
        }
        if !(self.lr >= 0.0) || !(self.entropy_coef >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("lr, entropy_coef and max_grad_norm must be non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden must list at least one non-zero layer width");
        }
        Ok(())
    }

    pub fn clip_norm(&self) -> Option<f64> {
        (self.max_grad_norm > 0.0).then_some(self.max_grad_norm)
    }
}

pub fn action_head(layout: &ActionLayout) -> ActionHead {
    match layout {
        ActionLayout::Discrete { displacements } => ActionHead::Categorical { n_actions: displacements.len() },
        ActionLayout::Continuous2d => ActionHead::Gaussian { dim: 2 },
    }
}

/// Actor, critic, and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub actor: Actor,
    pub critic: Critic,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Learner {
    pub fn new(env: &dyn Environment, cfg: &PpoConfig, rng: &mut impl Rng) -> Result<Self> {
        let actor = Actor::new(env.obs_dim(), &cfg.hidden, action_head(env.action_layout()), rng)?;
        let critic = Critic::new(env.global_dim(), &cfg.hidden, rng)?;
        Ok(Self::from_networks(actor, critic, cfg))
    }

    pub fn from_networks(actor: Actor, critic: Critic, cfg: &PpoConfig) -> Self {
        let actor_opt = Adam::new(actor.params.len(), cfg.lr, cfg.clip_norm());
        let critic_opt = Adam::new(critic.params.len(), cfg.lr, cfg.clip_norm());
        Learner { actor, critic, actor_opt, critic_opt }
    }
}

struct EnvSlot {
    state: EnvState,
    rng: ChaCha8Rng,
    pending: Vec<Transition>,
    running_return: f64,
}

/// Output of one collection cycle.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    /// Episode pieces, split at episode boundaries and at the horizon.
    pub trajectories: Vec<Trajectory>,
    /// Undiscounted returns of episodes that finished during this cycle.
    pub completed_returns: Vec<f64>,
    pub env_steps: usize,
}

/// Parallel environment instances, each with its own RNG stream, that persist
/// across collection cycles.
pub struct Collector {
    slots: Vec<EnvSlot>,
}

impl Collector {
    pub fn new(env: &dyn Environment, n_envs: usize, seed: u64) -> Self {
        let slots = (0..n_envs)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let state = env.reset(rng.next_u64());
                EnvSlot { state, rng, pending: Vec::new(), running_return: 0.0 }
            })
            .collect();
        Collector { slots }
    }

    /// Runs every environment for exactly `horizon` steps with the current
    /// (stochastic) policy.
    pub fn collect(
        &mut self,
        env: &dyn Environment,
        actor: &Actor,
        critic: &Critic,
        horizon: usize,
    ) -> Result<Rollout> {
        if horizon == 0 {
            return Err(EspError::invalid("horizon must be at least 1"));
        }
        let mut out = Rollout::default();
        for slot in &mut self.slots {
            for _ in 0..horizon {
                let mut actions = Vec::with_capacity(env.n_agents());
                let mut log_probs = Vec::with_capacity(env.n_agents());
                for obs in &slot.state.per_agent_obs {
                    let dist = actor.dist(obs)?;
                    let a = dist.sample(&mut slot.rng);
                    log_probs.push(dist.log_prob(&a)?);
                    actions.push(a);
                }
                let value = critic.value(&slot.state.global)?;
                let joint = JointAction(actions);
                let step = env
                    .step(&slot.state, &joint)
                    .map_err(|e| EspError::Environment { env: env.name().to_string(), source: Box::new(e) })?;
                slot.running_return += step.reward;
                out.env_steps += 1;
                let finished = step.done || step.truncated;
                slot.pending.push(Transition {
                    state: std::mem::replace(&mut slot.state, step.state.clone()),
                    joint_action: joint,
                    behavior_log_probs: log_probs,
                    value,
                    reward: step.reward,
                    next_state: step.state,
                    done: step.done,
                    truncated: step.truncated,
                    is_augmented: false,
                    source_element: None,
                });
                if finished {
                    let bootstrap = if step.done { 0.0 } else { critic.value(&slot.state.global)? };
                    out.trajectories.push(Trajectory::new(std::mem::take(&mut slot.pending), bootstrap));
                    out.completed_returns.push(slot.running_return);
                    slot.running_return = 0.0;
                    slot.state = env.reset(slot.rng.next_u64());
                }
            }
            if !slot.pending.is_empty() {
                let bootstrap = critic.value(&slot.state.global)?;
                out.trajectories.push(Trajectory::new(std::mem::take(&mut slot.pending), bootstrap));
            }
        }
        Ok(out)
    }
}

/// One-shot collection from fresh environments.
pub fn collect_rollouts(
    env: &dyn Environment,
    actor: &Actor,
    critic: &Critic,
    n_envs: usize,
    horizon: usize,
    seed: u64,
) -> Result<Rollout> {
    Collector::new(env, n_envs, seed).collect(env, actor, critic, horizon)
}

/// Transitions flattened over (time, agent). One row per timestep; the
/// advantage is shared by all agents of a row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub global_dim: usize,
    /// `rows × n_agents × obs_dim`.
    pub obs: Vec<f64>,
    /// `rows × global_dim`.
    pub global: Vec<f64>,
    /// `rows × n_agents`.
    pub actions: Vec<Action>,
    /// `rows × n_agents`.
    pub behavior_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the following state: the next row's prediction inside a
    /// trajectory, the bootstrap value at its end.
    pub next_values: Vec<f64>,
    pub dones: Vec<bool>,
    pub truncated: Vec<bool>,
    /// Last row of a trajectory piece; the GAE recursion stops here.
    pub segment_end: Vec<bool>,
    pub is_augmented: Vec<bool>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RolloutBatch {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .iter()
            .find_map(|t| t.transitions.first())
            .ok_or_else(|| EspError::invalid("cannot build a batch from no transitions"))?;
        let n_agents = first.joint_action.len();
        let obs_dim = first.state.per_agent_obs.first().map_or(0, Vec::len);
        let global_dim = first.state.global.len();
        let mut b = RolloutBatch { n_agents, obs_dim, global_dim, ..Default::default() };
        for traj in trajectories {
            let n = traj.transitions.len();
            for (k, tr) in traj.transitions.iter().enumerate() {
                if tr.joint_action.len() != n_agents
                    || tr.state.per_agent_obs.len() != n_agents
                    || tr.behavior_log_probs.len() != n_agents
                {
                    return Err(EspError::invalid("inconsistent agent count across transitions"));
                }
                if tr.state.global.len() != global_dim {
                    return Err(EspError::LayoutMismatch { expected: global_dim, actual: tr.state.global.len() });
                }
                for obs in &tr.state.per_agent_obs {
                    if obs.len() != obs_dim {
                        return Err(EspError::LayoutMismatch { expected: obs_dim, actual: obs.len() });
                    }
                    b.obs.extend_from_slice(obs);
                }
                b.global.extend_from_slice(&tr.state.global);
                b.actions.extend_from_slice(tr.joint_action.actions());
                b.behavior_log_probs.extend_from_slice(&tr.behavior_log_probs);
                b.rewards.push(tr.reward);
                b.values.push(tr.value);
                let last = k + 1 == n;
                b.next_values.push(if last { traj.bootstrap_value } else { traj.transitions[k + 1].value });
                b.dones.push(tr.done);
                b.truncated.push(tr.truncated);
                b.segment_end.push(last);
                b.is_augmented.push(tr.is_augmented);
            }
        }
        b.advantages = vec![0.0; b.rows()];
        b.targets = vec![0.0; b.rows()];
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.rewards.len()
    }

    pub fn obs_at(&self, row: usize, agent: usize) -> &[f64] {
        let start = (row * self.n_agents + agent) * self.obs_dim;
        &self.obs[start..start + self.obs_dim]
    }

    pub fn global_at(&self, row: usize) -> &[f64] {
        &self.global[row * self.global_dim..(row + 1) * self.global_dim]
    }

    pub fn action_at(&self, row: usize, agent: usize) -> &Action {
        &self.actions[row * self.n_agents + agent]
    }

    pub fn behavior_log_prob(&self, row: usize, agent: usize) -> f64 {
        self.behavior_log_probs[row * self.n_agents + agent]
    }

    pub fn real_rows(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&r| !self.is_augmented[r]).collect()
    }

    pub fn augmented_count(&self) -> usize {
        self.is_augmented.iter().filter(|a| **a).count()
    }
}

/// Backward-recursive GAE. Bootstraps from `next_values` at truncation and
/// uses zero after termination. Sets `targets = advantages + values`.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    let n = batch.rows();
    let mut running = 0.0;
    for t in (0..n).rev() {
        let nonterminal = if batch.dones[t] { 0.0 } else { 1.0 };
        if batch.segment_end[t] {
            running = 0.0;
        }
        let delta = batch.rewards[t] + gamma * batch.next_values[t] * nonterminal - batch.values[t];
        running = delta + gamma * lambda * nonterminal * running;
        batch.advantages[t] = running;
        batch.targets[t] = running + batch.values[t];
    }
}

/// Rescales advantages to zero mean and unit standard deviation.
pub fn normalize_advantages(batch: &mut RolloutBatch) {
    let n = batch.advantages.len();
    if n == 0 {
        return;
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt() + 1e-8;
    batch.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyLossStats {
    /// `−mean(surrogate) − entropy_coef · mean(entropy)`.
    pub loss: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss over `rows` (all agents of each row), averaged over
/// samples. Accumulates `∂loss/∂θ` into `grad` when given.
pub fn policy_loss(
    actor: &Actor,
    batch: &RolloutBatch,
    rows: &[usize],
    clip: f64,
    entropy_coef: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<PolicyLossStats> {
    let m = (rows.len() * batch.n_agents) as f64;
    if m == 0.0 {
        return Ok(PolicyLossStats::default());
    }
    let mut stats = PolicyLossStats::default();
    let mut clipped = 0usize;
    let mut cache = MlpCache::default();
    for &r in rows {
        let adv = batch.advantages[r];
        for i in 0..batch.n_agents {
            let dist = actor.forward_cached(batch.obs_at(r, i), &mut cache)?;
            let action = batch.action_at(r, i);
            let logp = dist.log_prob(action)?;
            let ratio = (logp - batch.behavior_log_prob(r, i)).exp();
            let clipped_ratio = ratio.clamp(1.0 - clip, 1.0 + clip);
            let unclipped_obj = ratio * adv;
            let clipped_obj = clipped_ratio * adv;
            let surrogate = unclipped_obj.min(clipped_obj);
            let entropy = dist.entropy();
            stats.surrogate += surrogate;
            stats.entropy += entropy;
            if (ratio - 1.0).abs() > clip {
                clipped += 1;
            }
            if let Some(g) = grad.as_deref_mut() {
                // d(min)/d logp is ρA on the unclipped branch and 0 otherwise.
                let d_logp = if unclipped_obj <= clipped_obj { -unclipped_obj / m } else { 0.0 };
                let mut d_out = dist.grad_log_prob(action)?;
                d_out.scale(d_logp);
                if entropy_coef != 0.0 {
                    d_out.add_scaled(&dist.grad_entropy(), -entropy_coef / m)?;
                }
                actor.backward(&cache, &d_out, g)?;
            }
        }
    }
    stats.surrogate /= m;
    stats.entropy /= m;
    stats.clip_fraction = clipped as f64 / m;
    stats.loss = -stats.surrogate - entropy_coef * stats.entropy;
    Ok(stats)
}

/// Mean squared error between critic predictions and value targets over `rows`.
pub fn value_loss(critic: &Critic, batch: &RolloutBatch, rows: &[usize], mut grad: Option<&mut [f64]>) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let m = rows.len() as f64;
    let mut loss = 0.0;
    let mut cache = MlpCache::default();
    for &r in rows {
        let v = critic.forward_cached(batch.global_at(r), &mut cache)?;
        let err = v - batch.targets[r];
        loss += err * err;
        if let Some(g) = grad.as_deref_mut() {
            critic.backward(&cache, 2.0 * err / m, g)?;
        }
    }
    Ok(loss / m)
}

/// Values and gradients contributed by an extra loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxStats {
    pub policy_term: f64,
    pub value_term: f64,
}

/// Extra differentiable terms minimized alongside the PPO losses on every
/// minibatch. Implementations keep their own randomness so that the trainer's
/// RNG stream is unaffected by their presence.
pub trait AuxiliaryLoss {
    /// Adds gradients of the weighted auxiliary loss into the actor and
    /// critic gradient buffers and returns the unweighted term values.
    fn accumulate(
        &mut self,
        actor: &Actor,
        critic: &Critic,
        batch: &RolloutBatch,
        rows: &[usize],
        actor_grad: &mut [f64],
        critic_grad: &mut [f64],
    ) -> Result<AuxStats>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean exact KL(π_old ‖ π_new) over the batch after the update.
    pub kl_old_new: f64,
    pub clip_fraction: f64,
    /// NaN when no auxiliary loss ran.
    pub sym_policy_loss: f64,
    pub sym_value_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub minibatch_steps: usize,
}

/// Splits shuffled rows into `k` near-equal contiguous chunks.
fn minibatch_chunks(rows: &[usize], k: usize) -> Vec<&[usize]> {
    let n = rows.len();
    let k = k.min(n).max(1);
    (0..k).map(|j| &rows[j * n / k..(j + 1) * n / k]).collect()
}

/// `epochs` passes of minibatch Adam on the clipped surrogate and value loss
/// (plus `aux` when present). Advantages and targets must already be set.
pub fn ppo_update(
    learner: &mut Learner,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    mut aux: Option<&mut dyn AuxiliaryLoss>,
) -> Result<UpdateStats> {
    if batch.rows() == 0 {
        return Err(EspError::invalid("empty rollout batch"));
    }
    let old_actor = learner.actor.clone();
    let mut rows: Vec<usize> = (0..batch.rows()).collect();
    let mut acc = UpdateStats {
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        kl_old_new: 0.0,
        clip_fraction: 0.0,
        sym_policy_loss: 0.0,
        sym_value_loss: 0.0,
        actor_grad_norm: 0.0,
        critic_grad_norm: 0.0,
        minibatch_steps: 0,
    };
    let mut actor_grad = vec![0.0; learner.actor.params.len()];
    let mut critic_grad = vec![0.0; learner.critic.params.len()];
    for _ in 0..cfg.epochs {
        rows.shuffle(rng);
        for mb in minibatch_chunks(&rows, cfg.minibatches) {
            actor_grad.fill(0.0);
            critic_grad.fill(0.0);
            let p = policy_loss(&learner.actor, batch, mb, cfg.clip, cfg.entropy_coef, Some(&mut actor_grad))?;
            let v = value_loss(&learner.critic, batch, mb, Some(&mut critic_grad))?;
            let a = match aux.as_deref_mut() {
                Some(aux) => {
                    aux.accumulate(&learner.actor, &learner.critic, batch, mb, &mut actor_grad, &mut critic_grad)?
                }
                None => AuxStats::default(),
            };
            if ![p.loss, v, a.policy_term, a.value_term].iter().all(|x| x.is_finite()) {
                return Err(EspError::Numerical(format!(
                    "non-finite loss (policy {}, value {}, aux {} / {}); update aborted",
                    p.loss, v, a.policy_term, a.value_term
                )));
            }
            let sa = learner.actor_opt.step(learner.actor.params.values_mut(), &mut actor_grad)?;
            let sc = learner.critic_opt.step(learner.critic.params.values_mut(), &mut critic_grad)?;
            if !learner.actor.params.all_finite() || !learner.critic.params.all_finite() {
                return Err(EspError::Numerical("parameters became non-finite".into()));
            }
            acc.policy_loss += p.loss;
            acc.value_loss += v;
            acc.entropy += p.entropy;
            acc.clip_fraction += p.clip_fraction;
            acc.sym_policy_loss += a.policy_term;
            acc.sym_value_loss += a.value_term;
            acc.actor_grad_norm += sa.grad_norm;
            acc.critic_grad_norm += sc.grad_norm;
            acc.minibatch_steps += 1;
        }
    }
    let k = acc.minibatch_steps as f64;
    for x in [
        &mut acc.policy_loss,
        &mut acc.value_loss,
        &mut acc.entropy,
        &mut acc.clip_fraction,
        &mut acc.sym_policy_loss,
        &mut acc.sym_value_loss,
        &mut acc.actor_grad_norm,
        &mut acc.critic_grad_norm,
    ] {
        *x /= k;
    }
    if aux.is_none() {
        acc.sym_policy_loss = f64::NAN;
        acc.sym_value_loss = f64::NAN;
    }
    acc.kl_old_new = mean_kl(&old_actor, &learner.actor, batch)?;
    Ok(acc)
}

/// Mean KL(π_a ‖ π_b) over every observation in the batch.
pub fn mean_kl(a: &Actor, b: &Actor, batch: &RolloutBatch) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..batch.rows() {
        for i in 0..batch.n_agents {
            let obs = batch.obs_at(r, i);
            total += a.dist(obs)?.kl(&b.dist(obs)?)?;
        }
    }
    Ok(total / (batch.rows() * batch.n_agents) as f64)
}

/// Deterministic-policy evaluation statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// Mean number of agent collisions per visited state.
    pub collision_rate: f64,
    /// Fraction of visited states flagged risky.
    pub risky_rate: f64,
    pub steps: usize,
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `episodes` episodes with argmax (discrete) or mean (continuous)
/// actions. Episode `k` starts from `env.reset(seed + k)`.
pub fn evaluate_policy(env: &dyn Environment, actor: &Actor, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(EspError::invalid("evaluation needs at least one episode"));
    }
    let mut returns = Vec::with_capacity(episodes);
    let (mut collisions, mut risky, mut steps) = (0usize, 0usize, 0usize);
    for k in 0..episodes {
        let mut state = env.reset(seed.wrapping_add(k as u64));
        let mut ret = 0.0;
        loop {
            let joint = JointAction(
                state.per_agent_obs.iter().map(|o| actor.dist(o).map(|d| d.mode())).collect::<Result<_>>()?,
            );
            let out = env.step(&state, &joint)?;
            ret += out.reward;
            let risk = env.risk(&out.state.global);
            collisions += risk.collisions;
            risky += usize::from(risk.risky);
            steps += 1;
            state = out.state;
            if out.done || out.truncated {
                break;
            }
        }
        returns.push(ret);
    }
    let (mean, stderr) = mean_stderr(&returns);
    Ok(EvalResult {
        returns,
        mean,
        stderr,
        collision_rate: collisions as f64 / steps as f64,
        risky_rate: risky as f64 / steps as f64,
        steps,
    })
}

//! Symmetry exploitation on top of MAPPO: trajectory augmentation through the
//! group action, the policy and value consistency losses, and the
//! importance-ratio diagnostic for naively transformed samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::symmetry_spec;
use crate::error::{EspError, Result};
use crate::game::{Environment, SymmetrySpec, Trajectory, Transition};
use crate::group::{mat_vec, transpose, GroupElement};
use crate::layout::{ActionLayout, ObservationLayout, Slice};
use crate::mappo::{ppo_update, AuxStats, AuxiliaryLoss, Learner, PpoConfig, RolloutBatch, UpdateStats};
use crate::nn::{Actor, Critic, DiagGaussian, GaussianGrad, MlpCache, OutputGrad, PolicyOutput};

pub const DEFAULT_COEF: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(transformed ‖ original).
    #[default]
    AsWritten,
    /// KL(original ‖ transformed).
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EspConfig {
    pub group: String,
    pub augmentation_elements: Vec<String>,
    pub consistency_elements: Vec<String>,
    pub c: f64,
    pub kl_direction: KlDirection,
    pub augment_enabled: bool,
    pub loss_enabled: bool,
    /// Treat the original-observation branch of the policy KL as a constant.
    pub stop_grad_original: bool,
}

impl Default for EspConfig {
    fn default() -> Self {
        EspConfig {
            group: "c4".into(),
            augmentation_elements: vec!["r90".into()],
            consistency_elements: vec!["r90".into()],
            c: DEFAULT_COEF,
            kl_direction: KlDirection::AsWritten,
            augment_enabled: true,
            loss_enabled: true,
            stop_grad_original: false,
        }
    }
}

impl EspConfig {
    /// Validates the config against `env` and resolves element names.
    pub fn resolve(&self, env: &dyn Environment) -> Result<ResolvedEsp> {
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(EspError::invalid(format!("consistency coefficient must be finite and ≥ 0, got {}", self.c)));
        }
        if !self.augment_enabled && !self.loss_enabled {
            return Err(EspError::invalid("at least one of augment_enabled and loss_enabled must be true"));
        }
        let spec = symmetry_spec(env, &self.group)?;
        let lookup = |names: &[String], what: &str| -> Result<Vec<GroupElement>> {
            names
                .iter()
                .map(|n| {
                    let g = spec.group.by_name(n)?.clone();
                    if g.is_identity() {
                        return Err(EspError::invalid(format!("{what} must not contain the identity")));
                    }
                    Ok(g)
                })
                .collect()
        };
        let augmentation = if self.augment_enabled {
            lookup(&self.augmentation_elements, "augmentation_elements")?
        } else {
            Vec::new()
        };
        let consistency =
            if self.loss_enabled { lookup(&self.consistency_elements, "consistency_elements")? } else { Vec::new() };
        if self.augment_enabled && augmentation.is_empty() {
            return Err(EspError::invalid("augmentation is enabled but augmentation_elements is empty"));
        }
        if self.loss_enabled && consistency.is_empty() {
            return Err(EspError::invalid("consistency loss is enabled but consistency_elements is empty"));
        }
        Ok(ResolvedEsp { config: self.clone(), spec, augmentation, consistency })
    }
}

#[derive(Clone, Debug)]
pub struct ResolvedEsp {
    pub config: EspConfig,
    pub spec: SymmetrySpec,
    pub augmentation: Vec<GroupElement>,
    pub consistency: Vec<GroupElement>,
}

impl ResolvedEsp {
    /// Whether the consistency terms take part in the update at all.
    pub fn loss_active(&self) -> bool {
        self.config.loss_enabled && self.config.c > 0.0 && !self.consistency.is_empty()
    }
}

/// One transformed copy of `traj` per element. Rewards and termination flags
/// are carried over; behavior log-probs and values are re-evaluated on the
/// transformed data with the current (pre-update) networks.
pub fn augment_trajectory(
    traj: &Trajectory,
    spec: &SymmetrySpec,
    elements: &[GroupElement],
    actor: &Actor,
    critic: &Critic,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(elements.len());
    for g in elements {
        let mut transitions = Vec::with_capacity(traj.len());
        for tr in &traj.transitions {
            let state = spec.transform_state(g, &tr.state)?;
            let joint_action = spec.transform_joint(g, &tr.joint_action)?;
            let behavior_log_probs = state
                .per_agent_obs
                .iter()
                .zip(joint_action.actions())
                .map(|(o, a)| actor.dist(o)?.log_prob(a))
                .collect::<Result<Vec<_>>>()?;
            let value = critic.value(&state.global)?;
            transitions.push(Transition {
                next_state: spec.transform_state(g, &tr.next_state)?,
                state,
                joint_action,
                behavior_log_probs,
                value,
                reward: tr.reward,
                done: tr.done,
                truncated: tr.truncated,
                is_augmented: !g.is_identity(),
                source_element: (!g.is_identity()).then_some(g.id()),
            });
        }
        let bootstrap = match traj.transitions.last() {
            Some(last) if !last.done => critic.value(&transitions.last().unwrap().next_state.global)?,
            _ => 0.0,
        };
        let mut t = Trajectory::new(transitions, bootstrap);
        t.episode_return = traj.episode_return;
        out.push(t);
    }
    Ok(out)
}

/// The transformed-branch distribution expressed over original actions:
/// `q(a) = π(K_g a | L_g o)`.
fn pull_back(spec: &SymmetrySpec, g: &GroupElement, transformed: &PolicyOutput) -> Result<PolicyOutput> {
    match transformed {
        PolicyOutput::Categorical(c) => {
            let perm = spec
                .action_permutation(g)
                .ok_or_else(|| EspError::invalid("discrete policy on a continuous action layout"))?;
            Ok(PolicyOutput::Categorical(c.permuted(perm)?))
        }
        PolicyOutput::Gaussian(d) => {
            let m = mat_vec(&transpose(g.linear_rep()), &[d.mean()[0], d.mean()[1]]);
            Ok(PolicyOutput::Gaussian(DiagGaussian::new(&m, d.log_std())?))
        }
    }
}

/// Maps a gradient w.r.t. the pulled-back distribution to one w.r.t. the
/// transformed branch's raw output.
fn push_forward(spec: &SymmetrySpec, g: &GroupElement, d_q: OutputGrad) -> Result<OutputGrad> {
    match d_q {
        OutputGrad::Logits(dq) => {
            let perm = spec
                .action_permutation(g)
                .ok_or_else(|| EspError::invalid("discrete policy on a continuous action layout"))?;
            let mut dt = vec![0.0; dq.len()];
            for (a, &p) in perm.iter().enumerate() {
                dt[p] += dq[a];
            }
            Ok(OutputGrad::Logits(dt))
        }
        OutputGrad::Gaussian(GaussianGrad { mean, log_std }) => {
            let m = mat_vec(g.linear_rep(), &[mean[0], mean[1]]);
            Ok(OutputGrad::Gaussian(GaussianGrad { mean: m.to_vec(), log_std }))
        }
    }
}

/// Options for [`symmetry_policy_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyLossOptions {
    pub direction: KlDirection,
    pub stop_grad_original: bool,
}

/// Mean KL between the pulled-back transformed-observation policy and the
/// original-observation policy over `rows` and all agents. Accumulates
/// `scale · ∂S_π/∂θ` into `grad` when given.
pub fn symmetry_policy_loss(
    actor: &Actor,
    batch: &RolloutBatch,
    rows: &[usize],
    spec: &SymmetrySpec,
    g: &GroupElement,
    opts: PolicyLossOptions,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let m = (rows.len() * batch.n_agents) as f64;
    if m == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut orig_cache = MlpCache::default();
    let mut trans_cache = MlpCache::default();
    for &r in rows {
        for i in 0..batch.n_agents {
            let obs = batch.obs_at(r, i);
            let p = actor.forward_cached(obs, &mut orig_cache)?;
            let t = actor.forward_cached(&spec.transform_obs(g, obs)?, &mut trans_cache)?;
            let q = pull_back(spec, g, &t)?;
            let (kl, d_q, d_p) = match opts.direction {
                KlDirection::AsWritten => {
                    let (dq, dp) = q.grad_kl(&p)?;
                    (q.kl(&p)?, dq, dp)
                }
                KlDirection::Reversed => {
                    let (dp, dq) = p.grad_kl(&q)?;
                    (p.kl(&q)?, dq, dp)
                }
            };
            total += kl;
            if let Some((g_buf, scale)) = grad.as_mut() {
                let w = *scale / m;
                let mut d_t = push_forward(spec, g, d_q)?;
                d_t.scale(w);
                actor.backward(&trans_cache, &d_t, g_buf)?;
                if !opts.stop_grad_original {
                    let mut d_p = d_p;
                    d_p.scale(w);
                    actor.backward(&orig_cache, &d_p, g_buf)?;
                }
            }
        }
    }
    Ok(total / m)
}

/// Mean of `(V(s) − V(L_g s))²` over `rows`. Accumulates `scale · ∂S_V/∂ψ`.
pub fn symmetry_value_loss(
    critic: &Critic,
    batch: &RolloutBatch,
    rows: &[usize],
    spec: &SymmetrySpec,
    g: &GroupElement,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let m = rows.len() as f64;
    let mut total = 0.0;
    let mut orig_cache = MlpCache::default();
    let mut trans_cache = MlpCache::default();
    for &r in rows {
        let s = batch.global_at(r);
        let v = critic.forward_cached(s, &mut orig_cache)?;
        let vg = critic.forward_cached(&spec.transform_global(g, s)?, &mut trans_cache)?;
        let diff = v - vg;
        total += diff * diff;
        if let Some((g_buf, scale)) = grad.as_mut() {
            let d = 2.0 * diff * *scale / m;
            critic.backward(&orig_cache, d, g_buf)?;
            critic.backward(&trans_cache, -d, g_buf)?;
        }
    }
    Ok(total / m)
}

/// The consistency terms as an auxiliary loss, with its own RNG for drawing
/// one consistency element per minibatch.
pub struct ConsistencyLoss<'a> {
    esp: &'a ResolvedEsp,
    rng: ChaCha8Rng,
}

impl<'a> ConsistencyLoss<'a> {
    pub fn new(esp: &'a ResolvedEsp, rng: ChaCha8Rng) -> Self {
        ConsistencyLoss { esp, rng }
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }
}

impl AuxiliaryLoss for ConsistencyLoss<'_> {
    fn accumulate(
        &mut self,
        actor: &Actor,
        critic: &Critic,
        batch: &RolloutBatch,
        rows: &[usize],
        actor_grad: &mut [f64],
        critic_grad: &mut [f64],
    ) -> Result<AuxStats> {
        let elements = &self.esp.consistency;
        let g = &elements[self.rng.random_range(0..elements.len())];
        let real: Vec<usize> = rows.iter().copied().filter(|&r| !batch.is_augmented[r]).collect();
        let c = self.esp.config.c;
        let opts = PolicyLossOptions {
            direction: self.esp.config.kl_direction,
            stop_grad_original: self.esp.config.stop_grad_original,
        };
        let policy_term = symmetry_policy_loss(actor, batch, &real, &self.esp.spec, g, opts, Some((actor_grad, c)))?;
        let value_term = symmetry_value_loss(critic, batch, &real, &self.esp.spec, g, Some((critic_grad, c)))?;
        Ok(AuxStats { policy_term, value_term })
    }
}

/// Builds the update batch: real trajectories plus, when augmentation is on,
/// one transformed copy per augmentation element.
pub fn augmented_trajectories(
    real: &[Trajectory],
    esp: Option<&ResolvedEsp>,
    actor: &Actor,
    critic: &Critic,
) -> Result<Vec<Trajectory>> {
    let mut all = real.to_vec();
    if let Some(esp) = esp {
        if esp.config.augment_enabled {
            for traj in real {
                all.extend(augment_trajectory(traj, &esp.spec, &esp.augmentation, actor, critic)?);
            }
        }
    }
    Ok(all)
}

/// A MAPPO update maximizing `J_MAPPO − c (S_π + S_V)`. When the consistency
/// terms are inactive this is exactly [`ppo_update`].
pub fn esp_update(
    learner: &mut Learner,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    esp: &ResolvedEsp,
    rng: &mut ChaCha8Rng,
    aux_rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if !esp.loss_active() {
        return ppo_update(learner, batch, cfg, rng, None);
    }
    let mut aux = ConsistencyLoss::new(esp, aux_rng.clone());
    let stats = ppo_update(learner, batch, cfg, rng, Some(&mut aux));
    *aux_rng = aux.into_rng();
    stats
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatioSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub p99: f64,
    pub count: usize,
}

/// Distribution of `π(K_g a | L_g o) / π(a | o)` over the real samples of
/// `batch`, with the denominator taken from the stored behavior log-probs.
pub fn ratio_diagnostic(
    actor: &Actor,
    batch: &RolloutBatch,
    spec: &SymmetrySpec,
    g: &GroupElement,
) -> Result<RatioSummary> {
    let mut ratios = Vec::new();
    for r in batch.real_rows() {
        for i in 0..batch.n_agents {
            let obs_g = spec.transform_obs(g, batch.obs_at(r, i))?;
            let a_g = spec.transform_action(g, batch.action_at(r, i))?;
            let lp = actor.dist(&obs_g)?.log_prob(&a_g)?;
            ratios.push((lp - batch.behavior_log_prob(r, i)).exp());
        }
    }
    if ratios.is_empty() {
        return Err(EspError::invalid("ratio diagnostic needs at least one real sample"));
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let p99_idx = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Ok(RatioSummary {
        min: ratios[0],
        max: ratios[n - 1],
        mean: ratios.iter().sum::<f64>() / n as f64,
        p99: ratios[p99_idx],
        count: n,
    })
}

/// An exactly equivariant actor on a geometric observation layout: four
/// first-layer units respond to the projection of a weighted block sum onto
/// the four axis directions, the second layer passes them through, and the
/// head maps each direction to the matching move (discrete) or to the sum of
/// direction vectors (continuous).
pub fn equivariant_actor(
    obs: &ObservationLayout,
    act: &ActionLayout,
    block_weights: &[f64],
    log_std: f64,
) -> Result<Actor> {
    const DIRS: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let head = crate::mappo::action_head(act);
    let mut actor = Actor::zeros(obs.len(), &[4, 4], head)?;
    write_direction_layer(actor.params.values_mut(), obs, block_weights, &DIRS)?;
    let vals = actor.params.values_mut();
    let l1 = obs.len() * 4 + 4;
    // Second layer: identity weights.
    for j in 0..4 {
        vals[l1 + j * 4 + j] = 1.0;
    }
    let l2 = l1 + 16 + 4;
    match act {
        ActionLayout::Discrete { displacements } => {
            for (a, d) in displacements.iter().enumerate() {
                if let Some(j) = DIRS.iter().position(|u| u == d) {
                    vals[l2 + a * 4 + j] = 1.0;
                } else if *d != [0.0, 0.0] {
                    return Err(EspError::invalid("equivariant fixture supports axis moves only"));
                }
            }
        }
        ActionLayout::Continuous2d => {
            for (j, d) in DIRS.iter().enumerate() {
                vals[l2 + j] = d[0];
                vals[l2 + 4 + j] = d[1];
            }
            let n = vals.len();
            vals[n - 2..].fill(log_std);
        }
    }
    Ok(actor)
}

/// An exactly invariant critic: the sum of the four direction units.
pub fn invariant_critic(global: &ObservationLayout, block_weights: &[f64]) -> Result<Critic> {
    const DIRS: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let mut critic = Critic::zeros(global.len(), &[4, 4])?;
    write_direction_layer(critic.params.values_mut(), global, block_weights, &DIRS)?;
    let vals = critic.params.values_mut();
    let l1 = global.len() * 4 + 4;
    for j in 0..4 {
        vals[l1 + j * 4 + j] = 1.0;
    }
    let l2 = l1 + 16 + 4;
    vals[l2..l2 + 4].fill(1.0);
    Ok(critic)
}

fn write_direction_layer(
    vals: &mut [f64],
    layout: &ObservationLayout,
    block_weights: &[f64],
    dirs: &[[f64; 2]; 4],
) -> Result<()> {
    let n_in = layout.len();
    let mut offset = 0;
    let mut block = 0;
    for slice in layout.slices() {
        match slice {
            Slice::Geometric2d => {
                let w = *block_weights
                    .get(block)
                    .ok_or_else(|| EspError::invalid("one weight per geometric block is required"))?;
                for (j, d) in dirs.iter().enumerate() {
                    vals[j * n_in + offset] = w * d[0];
                    vals[j * n_in + offset + 1] = w * d[1];
                }
                block += 1;
            }
            Slice::Invariant(_) => {}
        }
        offset += slice.len();
    }
    Ok(())
}

/// A fresh RNG for the consistency-element draws of a run.
pub fn aux_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

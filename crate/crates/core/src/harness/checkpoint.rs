//! Binary checkpoints.
//!
//! Layout (little-endian):
//! `MAGIC` (8 bytes), format version (u32), metadata length (u64), metadata
//! JSON, section count (u32), then per section: name length (u32), UTF-8
//! name, value count (u64), `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{EspError, Result};
use crate::game::Environment;
use crate::mappo::{action_head, Learner};
use crate::nn::{Actor, Adam, Critic};

pub const MAGIC: &[u8; 8] = b"ESPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 6] = ["actor", "critic", "actor_adam_m", "actor_adam_v", "critic_adam_m", "critic_adam_v"];

/// Position of a ChaCha stream: seed, stream id and word offset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || EspError::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub env: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub global_dim: usize,
    pub algorithm: String,
    pub seed: u64,
    pub step: usize,
    pub updates: usize,
    pub actor_adam_t: u64,
    pub critic_adam_t: u64,
    pub rng: RngState,
    pub aux_rng: RngState,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub learner: Learner,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| EspError::Checkpoint(e.to_string()))?;
        let l = &self.learner;
        let sections: [&[f64]; 6] = [
            l.actor.params.values(),
            l.critic.params.values(),
            &l.actor_opt.m,
            &l.actor_opt.v,
            &l.critic_opt.m,
            &l.critic_opt.v,
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
        for (name, values) in SECTIONS.iter().zip(sections) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(EspError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(EspError::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| EspError::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        if count != SECTIONS.len() {
            return Err(EspError::Checkpoint(format!("expected {} sections, found {count}", SECTIONS.len())));
        }
        let mut sections = Vec::with_capacity(count);
        for expected in SECTIONS {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| EspError::Checkpoint(e.to_string()))?;
            if name != expected {
                return Err(EspError::Checkpoint(format!("expected section `{expected}`, found `{name}`")));
            }
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| EspError::Checkpoint("section too large".into()))?)?;
            sections.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
        }
        if r.pos != bytes.len() {
            return Err(EspError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let env = meta.config.env.build()?;
        check_compatible(&meta, env.as_ref())?;
        let trainer = &meta.config.trainer;
        let mut actor = Actor::zeros(env.obs_dim(), &trainer.hidden, action_head(env.action_layout()))?;
        let mut critic = Critic::zeros(env.global_dim(), &trainer.hidden)?;
        let mut it = sections.into_iter();
        let mut next = || it.next().unwrap();
        actor.params.set_values(&next()).map_err(|e| EspError::Checkpoint(format!("actor: {e}")))?;
        critic.params.set_values(&next()).map_err(|e| EspError::Checkpoint(format!("critic: {e}")))?;
        let mut learner = Learner::from_networks(actor, critic, trainer);
        let restore = |opt: &mut Adam, m: Vec<f64>, v: Vec<f64>, t: u64, what: &str| {
            if m.len() != opt.m.len() || v.len() != opt.v.len() {
                return Err(EspError::Checkpoint(format!("{what} optimizer moments have the wrong length")));
            }
            opt.m = m;
            opt.v = v;
            opt.t = t;
            Ok(())
        };
        let (am, av, cm, cv) = (next(), next(), next(), next());
        restore(&mut learner.actor_opt, am, av, meta.actor_adam_t, "actor")?;
        restore(&mut learner.critic_opt, cm, cv, meta.critic_adam_t, "critic")?;
        Ok(Checkpoint { meta, learner })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Errors unless the checkpoint's networks fit `env`.
pub fn check_compatible(meta: &CheckpointMeta, env: &dyn Environment) -> Result<()> {
    if meta.obs_dim != env.obs_dim() || meta.global_dim != env.global_dim() || meta.n_agents != env.n_agents() {
        return Err(EspError::Checkpoint(format!(
            "checkpoint was trained on `{}` ({} agents, obs {}, global {}) but the environment is `{}` ({} agents, obs {}, global {})",
            meta.env,
            meta.n_agents,
            meta.obs_dim,
            meta.global_dim,
            env.name(),
            env.n_agents(),
            env.obs_dim(),
            env.global_dim()
        )));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EspError::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

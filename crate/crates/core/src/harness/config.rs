//! Experiment configuration: a TOML file with `[env]`, `[esp]`, `[trainer]`
//! and `[run]` sections. Every key has a default and unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{default_agents, make_env, ENV_NAMES};
use crate::error::{EspError, Result};
use crate::esp::EspConfig;
use crate::game::Environment;
use crate::mappo::PpoConfig;

/// Overrides the output root of every run when set.
pub const OUTPUT_ROOT_ENV: &str = "ESP_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mappo,
    #[default]
    MappoEsp,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Mappo => "mappo",
            Algorithm::MappoEsp => "mappo_esp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    /// Agents (predators, robots); 0 selects the environment's default.
    pub n_agents: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { name: "coop_nav".into(), n_agents: 0 }
    }
}

impl EnvConfig {
    pub fn agents(&self) -> usize {
        if self.n_agents == 0 {
            default_agents(&self.name)
        } else {
            self.n_agents
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        make_env(&self.name, self.agents())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub total_steps: usize,
    /// Evaluate (and checkpoint) every this many environment steps; 0 only
    /// evaluates at the end.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub n_seeds: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Record wall-clock time in metrics; disable for byte-identical reruns.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_steps: 150_000,
            eval_every: 25_000,
            eval_episodes: 50,
            n_seeds: 5,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            timing: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub env: EnvConfig,
    pub esp: EspConfig,
    pub trainer: PpoConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| EspError::Config { path: e.path().to_string(), message: e.inner().message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EspError::Config { path: ".".into(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, message: String| Err(EspError::Config { path: path.into(), message });
        if !ENV_NAMES.contains(&self.env.name.as_str()) {
            return field("env.name", format!("unknown environment `{}`", self.env.name));
        }
        if self.run.total_steps == 0 {
            return field("run.total_steps", "must be positive".into());
        }
        if self.run.eval_episodes == 0 {
            return field("run.eval_episodes", "must be positive".into());
        }
        if self.run.n_seeds == 0 {
            return field("run.n_seeds", "must be positive".into());
        }
        self.trainer.validate().map_err(|e| EspError::Config { path: "trainer".into(), message: e.to_string() })?;
        let env = self.env.build()?;
        if self.algorithm == Algorithm::MappoEsp {
            self.esp
                .resolve(env.as_ref())
                .map_err(|e| EspError::Config { path: "esp".into(), message: e.to_string() })?;
        }
        Ok(())
    }

    /// Output root: `ESP_OUTPUT_ROOT` when set, else `run.out_dir`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.run.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.trainer.gamma, 0.99);
        assert_eq!(cfg.trainer.lambda, 0.95);
        assert_eq!(cfg.trainer.clip, 0.2);
        assert_eq!(cfg.trainer.epochs, 10);
        assert_eq!(cfg.trainer.lr, 3e-4);
        assert_eq!(cfg.trainer.entropy_coef, 0.01);
        assert_eq!(cfg.trainer.n_envs, 8);
        assert_eq!(cfg.trainer.horizon, 200);
        assert_eq!(cfg.esp.c, 0.5);
        assert_eq!(cfg.run.eval_episodes, 50);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        match ExperimentConfig::from_toml_str("[trainer]\nlearning_rate = 0.1\n") {
            Err(EspError::Config { path, message }) => {
                assert!(path.starts_with("trainer"), "{path}");
                assert!(message.contains("learning_rate"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml_str("[esp]\nc = \"half\"\n") {
            Err(EspError::Config { path, .. }) => assert_eq!(path, "esp.c"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_toml_str("[run]\ntotal_steps = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[env]\nname = \"tag\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[esp]\naugmentation_elements = [\"e\"]\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.algorithm = Algorithm::Mappo;
        cfg.esp.augmentation_elements = vec!["r90".into(), "flipx".into()];
        cfg.esp.group = "d4".into();
        cfg.run.timing = false;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}

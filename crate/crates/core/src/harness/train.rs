//! The training loop and its on-disk run directory.
//!
//! ```text
//! <run_dir>/config.toml          resolved configuration
//! <run_dir>/metrics.csv          one row per update
//! <run_dir>/eval.csv             one row per evaluation point
//! <run_dir>/summary.json         final evaluation and run metadata
//! <run_dir>/checkpoints/*.bin    at every evaluation point and at the end
//! <run_dir>/error.txt            only after a failed update
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use super::config::{Algorithm, ExperimentConfig};
use crate::error::Result;
use crate::esp::{augmented_trajectories, aux_rng, esp_update, ratio_diagnostic, ResolvedEsp};
use crate::game::Environment;
use crate::mappo::{
    compute_gae, evaluate_policy, mean_stderr, normalize_advantages, ppo_update, Collector, EvalResult, Learner,
    RolloutBatch, UpdateStats,
};

pub const METRICS_HEADER: &str = "step,ep_reward_mean,ep_reward_stderr,policy_loss,value_loss,entropy,kl_old_new,clip_fraction,sym_policy_loss,sym_value_loss,ratio_max,wall_time_s";
pub const EVAL_HEADER: &str = "step,mean_return,stderr,collision_rate,risky_rate,episodes";

/// Evaluation episodes never share reset seeds with training environments.
const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SEED_OFFSET
}

/// One `metrics.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub ep_reward_mean: f64,
    pub ep_reward_stderr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl_old_new: f64,
    pub clip_fraction: f64,
    pub sym_policy_loss: f64,
    pub sym_value_loss: f64,
    pub ratio_max: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    fn new(step: usize, returns: &[f64], stats: &UpdateStats, ratio_max: f64, wall_time_s: f64) -> Self {
        let (ep_reward_mean, ep_reward_stderr) = mean_stderr(returns);
        MetricsRow {
            step,
            ep_reward_mean,
            ep_reward_stderr,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            kl_old_new: stats.kl_old_new,
            clip_fraction: stats.clip_fraction,
            sym_policy_loss: stats.sym_policy_loss,
            sym_value_loss: stats.sym_value_loss,
            ratio_max,
            wall_time_s,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.ep_reward_mean,
            self.ep_reward_stderr,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.kl_old_new,
            self.clip_fraction,
            self.sym_policy_loss,
            self.sym_value_loss,
            self.ratio_max,
            self.wall_time_s
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub result: EvalResult,
}

/// What a finished run reports back.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub env: String,
    pub algorithm: String,
    pub seed: u64,
    pub steps: usize,
    pub updates: usize,
    /// Stored transitions per real transition in the update buffer.
    pub buffer_factor: f64,
    pub evals: Vec<EvalPoint>,
    pub final_eval: EvalResult,
    #[serde(skip)]
    pub metrics: Vec<MetricsRow>,
}

/// `<env>_<algorithm>_seed<seed>`.
pub fn run_dir_name(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}_{}_seed{}", cfg.env.name, cfg.algorithm.as_str(), seed)
}

/// Trains under `root/<run_dir_name>`, with `root` taken from `out` when
/// given and from [`ExperimentConfig::output_root`] otherwise.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunSummary> {
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_root());
    train(cfg, seed, &root.join(run_dir_name(cfg, seed)))
}

/// The config as actually run: explicit seed, agent count and output root.
pub fn resolved_config(cfg: &ExperimentConfig, seed: u64, run_dir: &Path) -> ExperimentConfig {
    let mut r = cfg.clone();
    r.run.seed = seed;
    r.env.n_agents = cfg.env.agents();
    if let Some(parent) = run_dir.parent() {
        r.run.out_dir = parent.to_path_buf();
    }
    r
}

struct Run<'a> {
    cfg: ExperimentConfig,
    env: Box<dyn Environment>,
    esp: Option<ResolvedEsp>,
    learner: Learner,
    collector: Collector,
    rng: ChaCha8Rng,
    aux_rng: ChaCha8Rng,
    seed: u64,
    steps: usize,
    updates: usize,
    dir: &'a Path,
}

impl Run<'_> {
    fn checkpoint(&self, name: &str) -> Result<PathBuf> {
        let meta = CheckpointMeta {
            env: self.env.name().to_string(),
            n_agents: self.env.n_agents(),
            obs_dim: self.env.obs_dim(),
            global_dim: self.env.global_dim(),
            algorithm: self.cfg.algorithm.as_str().to_string(),
            seed: self.seed,
            step: self.steps,
            updates: self.updates,
            actor_adam_t: self.learner.actor_opt.t,
            critic_adam_t: self.learner.critic_opt.t,
            rng: RngState::capture(&self.rng),
            aux_rng: RngState::capture(&self.aux_rng),
            config: self.cfg.clone(),
        };
        let path = self.dir.join("checkpoints").join(name);
        Checkpoint { meta, learner: self.learner.clone() }.save(&path)?;
        Ok(path)
    }

    /// Collect, augment, estimate advantages and update once.
    fn iteration(&mut self) -> Result<(Vec<f64>, UpdateStats, f64, f64)> {
        let trainer = &self.cfg.trainer;
        let rollout =
            self.collector.collect(self.env.as_ref(), &self.learner.actor, &self.learner.critic, trainer.horizon)?;
        self.steps += rollout.env_steps;
        let trajectories = augmented_trajectories(
            &rollout.trajectories,
            self.esp.as_ref(),
            &self.learner.actor,
            &self.learner.critic,
        )?;
        let mut batch = RolloutBatch::from_trajectories(&trajectories)?;
        let buffer_factor = batch.rows() as f64 / (batch.rows() - batch.augmented_count()) as f64;
        compute_gae(&mut batch, trainer.gamma, trainer.lambda);
        if trainer.normalize_advantages {
            normalize_advantages(&mut batch);
        }
        let mut ratio_max = f64::NAN;
        if let Some(esp) = &self.esp {
            for g in &esp.augmentation {
                let r = ratio_diagnostic(&self.learner.actor, &batch, &esp.spec, g)?.max;
                ratio_max = if ratio_max.is_nan() { r } else { ratio_max.max(r) };
            }
        }
        let stats = match &self.esp {
            Some(esp) => esp_update(&mut self.learner, &batch, trainer, esp, &mut self.rng, &mut self.aux_rng)?,
            None => ppo_update(&mut self.learner, &batch, trainer, &mut self.rng, None)?,
        };
        self.updates += 1;
        Ok((rollout.completed_returns, stats, ratio_max, buffer_factor))
    }

    fn evaluate(&self) -> Result<EvalResult> {
        evaluate_policy(self.env.as_ref(), &self.learner.actor, self.cfg.run.eval_episodes, eval_seed(self.seed))
    }
}

/// Runs one seed to `run.total_steps` environment steps, writing the run
/// directory. A failing update leaves `checkpoints/failed.bin` and
/// `error.txt` behind before the error is returned.
pub fn train(cfg: &ExperimentConfig, seed: u64, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = resolved_config(cfg, seed, run_dir);
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let _ = fs::remove_file(run_dir.join("error.txt"));

    let env = cfg.env.build()?;
    let esp = match cfg.algorithm {
        Algorithm::Mappo => None,
        Algorithm::MappoEsp => Some(cfg.esp.resolve(env.as_ref())?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learner = Learner::new(env.as_ref(), &cfg.trainer, &mut rng)?;
    let collector = Collector::new(env.as_ref(), cfg.trainer.n_envs, seed);
    let mut run = Run {
        env,
        esp,
        learner,
        collector,
        rng,
        aux_rng: aux_rng(seed),
        seed,
        steps: 0,
        updates: 0,
        dir: run_dir,
        cfg,
    };

    let start = Instant::now();
    let mut metrics_file = BufWriter::new(fs::File::create(run_dir.join("metrics.csv"))?);
    writeln!(metrics_file, "{METRICS_HEADER}")?;
    let mut eval_file = BufWriter::new(fs::File::create(run_dir.join("eval.csv"))?);
    writeln!(eval_file, "{EVAL_HEADER}")?;

    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let mut buffer_factor = 1.0;
    let eval_every = run.cfg.run.eval_every;
    let mut next_eval = if eval_every > 0 { eval_every } else { usize::MAX };
    let record_eval = |run: &Run, evals: &mut Vec<EvalPoint>, eval_file: &mut BufWriter<fs::File>| -> Result<()> {
        let result = run.evaluate()?;
        writeln!(
            eval_file,
            "{},{},{},{},{},{}",
            run.steps,
            result.mean,
            result.stderr,
            result.collision_rate,
            result.risky_rate,
            result.returns.len()
        )?;
        eval_file.flush()?;
        evals.push(EvalPoint { step: run.steps, result });
        Ok(())
    };

    while run.steps < run.cfg.run.total_steps {
        let (returns, stats, ratio_max, factor) = match run.iteration() {
            Ok(v) => v,
            Err(e) => {
                let ck = run.checkpoint("failed.bin");
                let report = format!(
                    "update {} failed at step {}: {e}\ncheckpoint: {}\n",
                    run.updates + 1,
                    run.steps,
                    match &ck {
                        Ok(p) => p.display().to_string(),
                        Err(ce) => format!("not written ({ce})"),
                    }
                );
                fs::write(run_dir.join("error.txt"), report)?;
                metrics_file.flush()?;
                return Err(e);
            }
        };
        buffer_factor = factor;
        let wall = if run.cfg.run.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        let row = MetricsRow::new(run.steps, &returns, &stats, ratio_max, wall);
        writeln!(metrics_file, "{}", row.csv_line())?;
        metrics.push(row);
        if run.steps >= next_eval && run.steps < run.cfg.run.total_steps {
            metrics_file.flush()?;
            record_eval(&run, &mut evals, &mut eval_file)?;
            run.checkpoint(&format!("step_{}.bin", run.steps))?;
            while next_eval <= run.steps {
                next_eval += eval_every;
            }
        }
    }
    metrics_file.flush()?;
    record_eval(&run, &mut evals, &mut eval_file)?;
    run.checkpoint("final.bin")?;

    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        env: run.env.name().to_string(),
        algorithm: run.cfg.algorithm.as_str().to_string(),
        seed,
        steps: run.steps,
        updates: run.updates,
        buffer_factor,
        final_eval: evals.last().expect("final evaluation recorded").result.clone(),
        evals,
        metrics,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| crate::EspError::Numerical(e.to_string()))?;
    fs::write(run_dir.join("summary.json"), json)?;
    Ok(summary)
}

/// Loads a checkpoint and evaluates its actor on `env` (by default the
/// checkpoint's own environment).
pub fn evaluate_checkpoint(
    path: &Path,
    env: Option<&dyn Environment>,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let ck = Checkpoint::load(path)?;
    let own;
    let env = match env {
        Some(e) => e,
        None => {
            own = ck.meta.config.env.build()?;
            own.as_ref()
        }
    };
    super::checkpoint::check_compatible(&ck.meta, env)?;
    if crate::mappo::action_head(env.action_layout()) != ck.learner.actor.head() {
        return Err(crate::EspError::Checkpoint(format!(
            "`{}` has a different action space than the checkpoint",
            env.name()
        )));
    }
    evaluate_policy(env, &ck.learner.actor, episodes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algorithm: Algorithm) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.algorithm = algorithm;
        cfg.trainer.hidden = vec![8, 8];
        cfg.trainer.n_envs = 2;
        cfg.trainer.horizon = 25;
        cfg.trainer.epochs = 2;
        cfg.run.total_steps = 150;
        cfg.run.eval_every = 100;
        cfg.run.eval_episodes = 3;
        cfg.run.timing = false;
        cfg
    }

    fn read(dir: &Path, name: &str) -> String {
        fs::read_to_string(dir.join(name)).unwrap()
    }

    #[test]
    fn one_cycle_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Algorithm::Mappo);
        cfg.run.total_steps = 1;
        let s = train(&cfg, 0, dir.path()).unwrap();
        assert_eq!(s.updates, 1);
        assert_eq!(s.steps, 50);
        let text = read(dir.path(), "metrics.csv");
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("50,"));
        assert!(lines[1].ends_with(",NaN,NaN,NaN,0"), "{}", lines[1]);
    }

    #[test]
    fn run_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let s = train(&tiny(Algorithm::MappoEsp), 4, dir.path()).unwrap();
        assert_eq!(s.updates, 3);
        assert_eq!(s.buffer_factor, 2.0);
        assert!(dir.path().join("checkpoints/step_100.bin").exists());
        assert!(dir.path().join("checkpoints/final.bin").exists());
        assert!(dir.path().join("summary.json").exists());
        let steps: Vec<usize> = read(dir.path(), "metrics.csv")
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(steps, vec![50, 100, 150]);
        assert_eq!(read(dir.path(), "eval.csv").lines().count(), 3);
        for row in &s.metrics {
            assert!(row.ratio_max.is_finite() && row.sym_policy_loss.is_finite());
        }
        let snapshot = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(snapshot.run.seed, 4);
        assert_eq!(snapshot.env.n_agents, 3);
        assert_eq!(snapshot.trainer, tiny(Algorithm::MappoEsp).trainer);
    }

    #[test]
    fn reruns_are_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny(Algorithm::MappoEsp);
        train(&cfg, 9, a.path()).unwrap();
        train(&cfg, 9, b.path()).unwrap();
        assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
        assert_eq!(read(a.path(), "eval.csv"), read(b.path(), "eval.csv"));
    }

    #[test]
    fn checkpoint_evaluation_matches_the_live_actor() {
        let dir = tempfile::tempdir().unwrap();
        let s = train(&tiny(Algorithm::Mappo), 2, dir.path()).unwrap();
        let path = dir.path().join("checkpoints/final.bin");
        let again = evaluate_checkpoint(&path, None, 3, eval_seed(2)).unwrap();
        assert_eq!(again, s.final_eval);
        let wrong = crate::envs::make_env("predator_prey", 3).unwrap();
        assert!(evaluate_checkpoint(&path, Some(wrong.as_ref()), 3, 0).is_err());
        assert!(evaluate_checkpoint(&path, None, 0, 0).is_err());
    }

    #[test]
    fn failed_update_leaves_a_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Algorithm::Mappo);
        cfg.trainer.lr = 1e300;
        cfg.trainer.max_grad_norm = 0.0;
        let err = train(&cfg, 1, dir.path());
        assert!(err.is_err());
        assert!(dir.path().join("error.txt").exists());
        assert!(dir.path().join("checkpoints/failed.bin").exists());
    }
}

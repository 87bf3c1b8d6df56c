use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use esp_core::envs::make_env;
use esp_core::harness::ablate::default_workers;
use esp_core::harness::{ablate, evaluate_checkpoint, train_seed, verify, ExperimentConfig, Family, VerifyOptions};
use esp_core::Result;

/// Symmetry-prior MAPPO experiments.
#[derive(Parser)]
#[command(name = "esp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metrics, evaluations and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train this seed only (default: `run.n_seeds` seeds from `run.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (overrides ESP_OUTPUT_ROOT and `run.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate on this environment instead of the checkpoint's own.
        #[arg(long)]
        env: Option<String>,
        /// Agent count for `--env`.
        #[arg(long, requires = "env")]
        agents: Option<usize>,
    },
    /// Run the verification suite; exits nonzero on any failure.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for verify_report.txt and verify_report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation family over `run.n_seeds` seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["count", "type", "coef", "modules"])]
        family: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds: Vec<u64> = match seed {
                Some(s) => vec![s],
                None => (0..cfg.run.n_seeds as u64).map(|k| cfg.run.seed + k).collect(),
            };
            for s in seeds {
                let summary = train_seed(&cfg, s, out.as_deref())?;
                println!(
                    "seed {s}: {} steps, {} updates, final return {:.3} ± {:.3} -> {}",
                    summary.steps,
                    summary.updates,
                    summary.final_eval.mean,
                    summary.final_eval.stderr,
                    summary.run_dir.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { checkpoint, episodes, seed, env, agents } => {
            let env = match env {
                Some(name) => {
                    let n = agents.unwrap_or_else(|| esp_core::envs::default_agents(&name));
                    Some(make_env(&name, n)?)
                }
                None => None,
            };
            let r = evaluate_checkpoint(&checkpoint, env.as_deref(), episodes, seed)?;
            println!("episodes        {}", r.returns.len());
            println!("mean return     {:.6}", r.mean);
            println!("stderr          {:.6}", r.stderr);
            println!("collision rate  {:.6}", r.collision_rate);
            println!("risky rate      {:.6}", r.risky_rate);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { config, out } => {
            let mut opts = VerifyOptions::default();
            let mut root = ExperimentConfig::default().output_root();
            if let Some(path) = config {
                let cfg = ExperimentConfig::load(&path)?;
                opts.seed = cfg.run.seed;
                root = cfg.output_root();
                opts.extra_env = Some(cfg.env);
            }
            let report = verify(&opts)?;
            print!("{report}");
            let dir = out.unwrap_or(root).join("verify");
            write_report(&dir, &report.to_string(), &report.to_json())?;
            println!("report written to {}", dir.display());
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Ablate { config, family, out, workers } => {
            let cfg = ExperimentConfig::load(&config)?;
            let family: Family = family.parse()?;
            let summary = ablate(&cfg, family, out.as_deref(), workers.unwrap_or_else(default_workers))?;
            print!("{}", summary.to_csv());
            println!("summary written to {}", summary.root.join("summary.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_report(dir: &Path, text: &str, json: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("verify_report.txt"), text)?;
    fs::write(dir.join("verify_report.json"), json)?;
    Ok(())
}

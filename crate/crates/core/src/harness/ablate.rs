//! Ablation grids over the augmentation count, augmentation type,
//! consistency coefficient, and the {augmentation, loss} module grid.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::config::{Algorithm, ExperimentConfig};
use super::train::{train_seed, RunSummary};
use crate::error::{EspError, Result};
use crate::mappo::mean_stderr;

pub const ROTATIONS: [&str; 3] = ["r90", "r180", "r270"];
pub const COEFFICIENTS: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// One to three rotation augmentations, consistency loss off.
    Count,
    /// Rotation-only vs rotation plus x-flip augmentation, loss off.
    Type,
    /// Consistency coefficient sweep with augmentation off, plus the
    /// baseline arm the `c = 0` cell must reproduce.
    Coef,
    /// The 2×2 {augmentation, consistency loss} grid.
    Modules,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Count, Family::Type, Family::Coef, Family::Modules];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Count => "count",
            Family::Type => "type",
            Family::Coef => "coef",
            Family::Modules => "modules",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = EspError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.as_str() == s).ok_or_else(|| {
            EspError::invalid(format!("unknown ablation family `{s}` (expected count, type, coef or modules)"))
        })
    }
}

/// One cell of an ablation grid.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub config: ExperimentConfig,
}

impl Arm {
    fn baseline(base: &ExperimentConfig) -> Self {
        let mut config = base.clone();
        config.algorithm = Algorithm::Mappo;
        Arm { name: "baseline".into(), config }
    }

    fn esp(base: &ExperimentConfig, name: impl Into<String>, edit: impl FnOnce(&mut ExperimentConfig)) -> Self {
        let mut config = base.clone();
        config.algorithm = Algorithm::MappoEsp;
        edit(&mut config);
        Arm { name: name.into(), config }
    }

    pub fn augment(&self) -> bool {
        self.config.algorithm == Algorithm::MappoEsp && self.config.esp.augment_enabled
    }

    pub fn loss(&self) -> bool {
        self.config.algorithm == Algorithm::MappoEsp && self.config.esp.loss_enabled && self.config.esp.c > 0.0
    }
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// The arms of `family` derived from `base`.
pub fn arms(base: &ExperimentConfig, family: Family) -> Vec<Arm> {
    match family {
        Family::Count => (1..=ROTATIONS.len())
            .map(|k| {
                Arm::esp(base, format!("rotations_{k}"), |c| {
                    c.esp.augment_enabled = true;
                    c.esp.loss_enabled = false;
                    c.esp.augmentation_elements = strings(&ROTATIONS[..k]);
                })
            })
            .collect(),
        Family::Type => [("rotation", vec!["r90"]), ("rotation_flip", vec!["r90", "flipx"])]
            .into_iter()
            .map(|(name, elements)| {
                Arm::esp(base, name, |c| {
                    c.esp.group = "d4".into();
                    c.esp.augment_enabled = true;
                    c.esp.loss_enabled = false;
                    c.esp.augmentation_elements = strings(&elements);
                })
            })
            .collect(),
        Family::Coef => std::iter::once(Arm::baseline(base))
            .chain(COEFFICIENTS.iter().map(|&coef| {
                Arm::esp(base, format!("c_{coef}"), |c| {
                    c.esp.augment_enabled = false;
                    c.esp.loss_enabled = true;
                    c.esp.c = coef;
                })
            }))
            .collect(),
        Family::Modules => vec![
            Arm::baseline(base),
            Arm::esp(base, "augment_only", |c| {
                c.esp.augment_enabled = true;
                c.esp.loss_enabled = false;
            }),
            Arm::esp(base, "loss_only", |c| {
                c.esp.augment_enabled = false;
                c.esp.loss_enabled = true;
            }),
            Arm::esp(base, "both", |c| {
                c.esp.augment_enabled = true;
                c.esp.loss_enabled = true;
            }),
        ],
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub augment: bool,
    pub loss: bool,
    pub c: f64,
    pub augmentation_elements: Vec<String>,
    pub buffer_factor: f64,
    pub seeds: Vec<u64>,
    pub seed_returns: Vec<f64>,
    pub mean_return: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationSummary {
    pub family: Family,
    pub root: PathBuf,
    pub arms: Vec<ArmSummary>,
}

impl AblationSummary {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub const CSV_HEADER: &'static str =
        "family,arm,augment,loss,c,augmentation_elements,buffer_factor,n_seeds,mean_return,stderr,seed_returns";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for a in &self.arms {
            let returns: Vec<String> = a.seed_returns.iter().map(|r| r.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                self.family,
                a.name,
                a.augment,
                a.loss,
                if a.loss { a.c } else { 0.0 },
                if a.augment { a.augmentation_elements.join(";") } else { String::new() },
                a.buffer_factor,
                a.seeds.len(),
                a.mean_return,
                a.stderr,
                returns.join(";")
            ));
        }
        out
    }
}

/// Runs every `(arm, seed)` pair on up to `workers` threads. Results come
/// back in input order regardless of scheduling.
pub fn run_grid(jobs: &[(ExperimentConfig, u64, PathBuf)], workers: usize) -> Vec<Result<RunSummary>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, seed, root)) = jobs.get(i) else { break };
                let r = train_seed(cfg, *seed, Some(root));
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Seeds `base.run.seed .. base.run.seed + n_seeds`.
pub fn seeds(base: &ExperimentConfig) -> Vec<u64> {
    (0..base.run.n_seeds as u64).map(|k| base.run.seed + k).collect()
}

/// Runs one ablation family and writes `summary.csv`, `runs.csv` and
/// `summary.json` under `root/ablate_<family>`.
pub fn ablate(base: &ExperimentConfig, family: Family, out: Option<&Path>, workers: usize) -> Result<AblationSummary> {
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| base.output_root()).join(format!("ablate_{family}"));
    let arms = arms(base, family);
    for arm in &arms {
        arm.config.validate()?;
    }
    let seeds = seeds(base);
    let jobs: Vec<_> = arms
        .iter()
        .flat_map(|arm| {
            let dir = root.join(&arm.name);
            seeds.iter().map(move |&s| (arm.config.clone(), s, dir.clone()))
        })
        .collect();
    let results = run_grid(&jobs, workers);
    fs::create_dir_all(&root)?;

    let mut runs_csv = String::from("arm,seed,final_return,final_stderr,buffer_factor,run_dir\n");
    let mut summaries = Vec::new();
    let mut results = results.into_iter();
    for arm in &arms {
        let mut returns = Vec::new();
        let mut factor = 1.0;
        for &seed in &seeds {
            let run = results.next().expect("one result per job")?;
            runs_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                arm.name,
                seed,
                run.final_eval.mean,
                run.final_eval.stderr,
                run.buffer_factor,
                run.run_dir.display()
            ));
            returns.push(run.final_eval.mean);
            factor = run.buffer_factor;
        }
        let (mean_return, stderr) = mean_stderr(&returns);
        summaries.push(ArmSummary {
            name: arm.name.clone(),
            augment: arm.augment(),
            loss: arm.loss(),
            c: arm.config.esp.c,
            augmentation_elements: arm.config.esp.augmentation_elements.clone(),
            buffer_factor: factor,
            seeds: seeds.clone(),
            seed_returns: returns,
            mean_return,
            stderr,
        });
    }
    let summary = AblationSummary { family, root: root.clone(), arms: summaries };
    fs::write(root.join("summary.csv"), summary.to_csv())?;
    fs::write(root.join("runs.csv"), runs_csv)?;
    fs::write(
        root.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| EspError::Numerical(e.to_string()))?,
    )?;
    Ok(summary)
}

//! Experiment plumbing: configuration, training runs with metrics and
//! checkpoints, the verification suite, and ablation grids.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod train;
pub mod verify;

pub use ablate::{ablate, arms, AblationSummary, Arm, ArmSummary, Family};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Algorithm, EnvConfig, ExperimentConfig, RunConfig, OUTPUT_ROOT_ENV};
pub use train::{evaluate_checkpoint, train, train_seed, MetricsRow, RunSummary, METRICS_HEADER};
pub use verify::{verify, VerifyOptions, VerifyReport};

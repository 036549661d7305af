//! Experiment harness: config files, deterministic runs, trajectory
//! output, shipped presets and the verification suite.

pub mod config;
pub mod presets;
pub mod run;
pub mod verify;

pub use config::{
    AdapterSpec, BatchConfig, ConfigFile, ExperimentConfig, InitSpec, OptimizerId, ProblemSpec, Schedule,
    CONFIG_VERSION,
};
pub use presets::{preset, preset_names, PRESETS};
pub use run::{
    build_adapter, build_target, read_trajectory_csv, resume_experiment, run_batch, run_experiment, summary_line,
    trajectory_csv, write_outputs, Checkpoint, FinalMetrics, MethodState, OutputFiles, RunOutcome, TrajectoryRecord,
};
pub use verify::{verify_suite, verify_suite_with, CheckReport, CheckStatus, VerifyOptions};

//! Orchestration: run configuration, dataset layout, the end-to-end dehaze
//! job, and the hyperparameter sweep.

mod config;
mod job;
mod sweep;

pub use config::{
    config_to_string, is_log_uniform, load_config, parse_config, save_config, RunConfig,
    RunPaths, SweepRange, SweepSpec, SWEEPABLE,
};
#[cfg(feature = "png")]
pub use job::{load_phantom_dir, run_dehaze_job, save_phantom_dir, write_haze};
pub use job::{
    evaluate_config_on_set, evaluate_set, process_image, report_to_string, DehazeDeps,
    ImageOutcome, JobSummary, NamedSample, SegSource, SetEvaluation,
};
pub use sweep::{run_sweep, SweepOutcome, SweepTrial, TrialStatus};

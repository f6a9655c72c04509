//! Experiment configuration, runner, reports and verification.

mod config;
mod runner;

pub use config::{parse_real, DatasetConfig, DatasetSource, EvalConfig, ExperimentConfig, RawConfig};
pub use runner::{
    eval_checkpoint, evaluate_model, load_data, report_cfps_bars, run_dir, run_experiment, summarize_corruption,
    verify_report, write_outputs, AttackResult, ClassTable, CorruptionResult, CorruptionSummary, ExperimentReport,
    ModelReport, RunReport, RunStatus, RunTiming, VerifySummary, VERIFY_TOLERANCE,
};

//! Command-line surface: run configuration, checkpoint files, and one
//! function per pipeline stage operating on a run directory.

mod checkpoint;
mod commands;
mod config;
mod report;

pub use checkpoint::{CheckpointFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    cmd_adapt, cmd_evaluate, cmd_generate, cmd_run, cmd_select_source, cmd_train_source, cmd_train_valuenet,
    evaluate_logits, EvalSummary, PipelineEnd, RunDir, RunSummary, SourceSelection, Split, SUMMARY_HEADER,
};
pub use config::{DataConfig, RunConfig, KEYS};
pub use report::{build_report, cmd_report, find_runs, AlphaMean, Report, ReportRow};

//! Pre-evaluation, continued pretraining, post-evaluation, sample-count
//! sweeps and run reports.

mod config;
mod report;
mod run;
mod train;

pub use config::{DatasetConfig, DatasetKind, ExperimentConfig, ExperimentSettings, WarmStartConfig};
pub use report::{mean_std, report, signed, GroupSummary, MetricSummary, Report, ReportAggregate, REPORT_FILE};
pub use run::{
    prepare, run_cp, run_cp_prepared, run_seed, run_sweep, seed_dir, sweep_prepared, warm_start, write_json, Prepared,
    RunMeta, SeedOutcome, SweepRow, SweepSummaryRow, SweepTable, CHECKPOINT_FILE, LOG_FILE, META_FILE, POST_FILE,
    PRE_FILE,
};
pub use train::{
    train_diet, EpochRecord, EvalSnapshot, FreezePlan, PhaseTransition, RunLog, Snapshots, StepRecord, TrainSpec,
};

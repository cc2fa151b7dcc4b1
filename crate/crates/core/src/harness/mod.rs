//! Experiment orchestration: runs, evaluation, sweeps and patience studies.

pub mod config;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::{
    DataConfig, DataSource, IdxFiles, PatienceFile, RunConfig, SplitTag, SweepFile, SweepSpec,
    TeacherConfig, TeacherMember,
};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use run::{
    agreement, distill, distill_with, evaluate, evaluate_checkpoint, params_checksum,
    train_teacher, EvalOptions, EvalResult, RunOutcome, Teacher,
};
pub use sweep::{patience, report_csv, sweep, PatienceReport, SweepReport};

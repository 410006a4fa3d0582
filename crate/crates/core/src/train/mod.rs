//! Pretraining loop, configuration, checkpoints, metrics and evaluation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod pipeline;
pub mod run;
pub mod schedule;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, EvalConfig, OptimConfig, TeacherConfig, TeacherMode, TrainConfig};
pub use metrics::{export_metrics, MetricsRow, HEADER};
pub use pipeline::{RunShape, StepOutcome, Trainer};
pub use run::{pretrain, PretrainOptions, PretrainOutcome};
pub use schedule::lr_at;

//! Training, evaluation, inference and benchmarking.

mod bench;
mod checkpoint;
mod eval;
mod optim;
mod schedule;
mod train;

pub use bench::{bench, match_param_count, BenchRow, BenchVariant};
pub use checkpoint::{Checkpoint, CheckpointHeader, OptimizerMeta, TensorEntry, FORMAT_VERSION, MAGIC};
pub use eval::{evaluate, evaluate_example, EvalRow, EvalTable, Estimator};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use schedule::PlateauSchedule;
pub use train::{random_crop, read_metrics, train, MetricRecord, StepStats, TrainOptions, TrainReport, Trainer};

//! Two-stage training, anymodal evaluation, ablations and run artifacts.

mod ablation;
mod config;
mod eval;
mod gradients;
mod metrics;
mod optim;
mod train;

pub use ablation::{run_ablation, AblationRow, AblationTable, AblationVariant};
pub use config::{
    DataConfig, ExperimentConfig, LossConfig, LossToggles, ModelConfig, OptimizerConfig, SeedConfig,
    DESK_LEARNING_RATE,
};
pub use eval::{compute_miou, evaluate_anymodal, evaluate_with, EvalRow, EvalTable, MiouResult};
pub use gradients::{run_gradient_suite, GradientCase, GradientSuite, GRADIENT_TOLERANCE, LOSS_CASES};
pub use metrics::{parse_metrics, read_metrics, MetricRecord, MetricsWriter};
pub use optim::{AdamW, LrSchedule};
pub use train::{
    load_model, train_student, train_supervised_baseline, train_teacher, RunOutput, StudentOutput,
    STUDENT_CHECKPOINT, STUDENT_METRICS, TEACHER_CHECKPOINT, TEACHER_METRICS,
};

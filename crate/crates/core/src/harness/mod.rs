//! Orchestration: configuration, training loops, evaluation, ablation,
//! invariance analysis, and the CLI.

pub mod cli;
pub mod config;
pub mod evaluate;
pub mod train;

pub use config::TrainConfig;
pub use evaluate::{
    ablation_run, degraded_means, evaluate, invariance_report, AblationTable, EvalModel,
    InvarianceReport, PromptPolicy, ABLATION_VARIANTS, INVARIANCE_KINDS,
};
pub use train::{
    load_clear_split, load_run_checkpoint, model_miou, pretrain_teacher, robust_infer,
    save_run_checkpoint, teacher_infer, train_robust, Logger, RunState, StepLosses,
};

//! Fine-tuning, evaluation metrics and experiment drivers.

pub mod experiment;
pub mod finetune;
pub mod metrics;

pub use experiment::{
    prepare, run_ablation, run_pipeline, run_scenario, sweep_gamma_p, sweep_prototype_count, AblationReport,
    PipelineResult, Prepared, ScenarioReport,
};
pub use finetune::{earlystop_score, finetune_loop, FinetuneConfig, FinetuneData, MetricsRecord, RunResult};
pub use metrics::{auroc, mean_stderr, pearson};

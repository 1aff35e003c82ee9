//! Orchestration of the cascade: splits, the two stages, the R2-only
//! ablation, metrics, timings and the multi-seed study.

mod cascade;
mod split;
mod study;

pub use cascade::{
    extract_all, predict_nodes, run_cascade, stage_graph, stage_r1, stage_r2, train_gat,
    AblationMode, AccountFeatures, CascadeConfig, CascadeOutput, EvalSplit, Evaluation, PipelineError,
    R1Output, R2Output, RunDetails, RunReport, Stage, StageError, Timings,
};
pub use split::{assign_splits, split_r1, split_r2, SplitAssignment, SplitError};
pub use study::{
    min_max_normalize, population_std, summarize, ten_run_study, write_study_csv, MetricTriple,
    StudyResult, StudyRow, StudySummary, DEFAULT_STUDY_SEEDS, STUDY_HEADER, STUDY_MODELS,
};

pub use crate::metrics::{compute_metrics, f1_score, Confusion, Metrics, MetricsError};

//! Metrics, rank statistics, the z-score baseline and end-to-end runs.

mod baseline;
mod metrics;
mod pipeline;
mod stats;

pub use baseline::zscore_baseline;
pub use metrics::{confusion, load_labels, point_adjust, ConfusionCounts};
pub use pipeline::{
    ablate_sampling, clean_prefix_len, extract, run_on_vitals, run_pipeline, AblationReport, AblationRow,
    PipelineConfig, PipelineOutcome,
};
pub use stats::{
    dunn_pooled, dunn_posthoc, friedman_test, rank_matrix, Adjustment, DunnComparison, FriedmanResult, MethodScoreTable,
    REFERENCE_F1_CSV,
};

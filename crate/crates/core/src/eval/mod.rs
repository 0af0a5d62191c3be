//! Metrics, the instance-level embedding probe, attention diagnostics, and
//! runners for loss ablations and mask-ratio sweeps.

mod attention;
mod knn;
mod metrics;
mod runners;

pub use attention::{
    attention_stats, median, percentile_transform, AttentionAlignment, AttentionStats, ATTENTION_BINS, HIGH_ATTENTION,
};
pub use knn::{knn_predict, knn_probe, PROBE_K};
pub use metrics::{accuracy_recall_f1, auc_binary, auc_macro, metrics_report, BinaryMetrics, MetricsReport};
pub use runners::{
    attention_skew, evaluate, probe_csv, run_ablation, run_mask_sweep, run_probe, train_and_test,
    train_and_test_abmil, GridRow, GridTable, LossCombo, ProbeConfig, ProbeRow, RunSummary, SkewReport, Spread,
    SplitData, MAX_SWEEP_RATIO,
};

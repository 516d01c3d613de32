//! Evaluation statistics for binary classifiers: confusion-matrix metrics,
//! Mann–Whitney AUC, DeLong variance/CI and paired tests, one-way ANOVA with
//! Bonferroni post-hoc comparisons, and mean ± std report tables.

pub mod anova;
pub mod delong;
pub mod metrics;
pub mod report;

pub use anova::{anova_posthoc, AnovaTable};
pub use delong::{delong_ci, delong_paired_test};
pub use metrics::{auc, binary_metrics, roc_points, BinaryMetrics, ConfusionCounts, ScoredSet};
pub use report::{mean_std, report, significance_marker, FoldScores, MetricsReport, ModelScores, ReportRow, StdMode};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("both classes must be present (positives: {positives}, negatives: {negatives})")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("score vectors do not describe the same cases: {0}")]
    Pairing(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Outcome of an estimate or hypothesis test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    /// Point estimate (AUC, AUC difference, or mean difference).
    pub estimate: f64,
    /// Test statistic (z, t or F depending on `method`).
    pub statistic: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: String,
}

pub(crate) fn clamp_p(p: f64) -> f64 {
    if p.is_nan() {
        1.0
    } else {
        p.clamp(0.0, 1.0)
    }
}

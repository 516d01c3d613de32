use serde::{Deserialize, Serialize};

use crate::{Result, StatsError};

/// Confusion matrix of a binary classifier (positive = class 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Thresholds positive-class probabilities: `score >= threshold` predicts 1.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        assert_eq!(scores.len(), labels.len());
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub acc: f64,
    pub f1: f64,
    pub mcc: f64,
}

/// Accuracy, F1 and Matthews correlation. Degenerate denominators give 0.
pub fn binary_metrics(c: &ConfusionCounts) -> Result<BinaryMetrics> {
    let total = c.total();
    if total == 0 {
        return Err(StatsError::InsufficientData("empty confusion matrix".into()));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let acc = (tp + tn) / total as f64;
    let f1_den = 2.0 * tp + fp + fn_;
    let f1 = if f1_den == 0.0 { 0.0 } else { 2.0 * tp / f1_den };
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if factors.contains(&0.0) {
        0.0
    } else {
        (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
    };
    Ok(BinaryMetrics { acc, f1, mcc })
}

/// Per-case positive-class scores with binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(StatsError::InvalidInput(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(StatsError::InvalidInput(format!("label {l} is not binary")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(StatsError::InvalidInput("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> Vec<f64> {
        self.by_label(1)
    }

    pub fn negatives(&self) -> Vec<f64> {
        self.by_label(0)
    }

    fn by_label(&self, y: u8) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == y)
            .map(|(&s, _)| s)
            .collect()
    }

    pub(crate) fn require_both(&self, min_each: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (pos, neg) = (self.positives(), self.negatives());
        if pos.len() < min_each.max(1) || neg.len() < min_each.max(1) {
            return Err(StatsError::DegenerateLabels {
                positives: pos.len(),
                negatives: neg.len(),
            });
        }
        Ok((pos, neg))
    }
}

/// 1-based midranks of `values` (ties share the average rank).
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.require_both(1)?;
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let ranks = midranks(set.scores());
    let rank_sum: f64 = ranks
        .iter()
        .zip(set.labels())
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down.
pub fn roc_points(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = set.require_both(1)?;
    let mut pairs: Vec<(f64, u8)> = set.scores().iter().copied().zip(set.labels().iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pts = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg.len() as f64, tp as f64 / pos.len() as f64));
    }
    Ok(pts)
}

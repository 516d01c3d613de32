//! Mean ± std summaries over cross-validation folds, with paired DeLong
//! comparisons against a reference model on the pooled out-of-fold scores.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{anova_posthoc, auc, binary_metrics, delong_paired_test, AnovaTable, ConfusionCounts, Result, ScoredSet, StatsError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divides by `n − 1`.
    #[default]
    Sample,
    /// Divides by `n`.
    Population,
}

/// Out-of-fold predictions of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub case_ids: Vec<String>,
    /// Positive-class probabilities.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub name: String,
    pub folds: Vec<FoldScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub folds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub mcc_mean: f64,
    pub mcc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Paired DeLong p-value against the reference model (pooled scores).
    pub p_vs_reference: Option<f64>,
    pub marker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub reference: Option<String>,
    pub std_mode: StdMode,
    pub rows: Vec<ReportRow>,
    /// One-way ANOVA over per-fold AUCs, when at least two models are present.
    pub auc_anova: Option<AnovaTable>,
}

pub fn mean_std(xs: &[f64], mode: StdMode) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    let div = match mode {
        StdMode::Sample if n > 1 => (n - 1) as f64,
        StdMode::Sample => return (mean, 0.0),
        StdMode::Population => n as f64,
    };
    (mean, (ss / div).sqrt())
}

/// `*` for p < 0.05, `**` for p < 0.001, `***` for p < 0.0001.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 1e-4 {
        "***"
    } else if p < 1e-3 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn pooled(model: &ModelScores) -> Vec<(&str, f64, u8)> {
    let mut rows: Vec<(&str, f64, u8)> = model
        .folds
        .iter()
        .flat_map(|f| {
            f.case_ids
                .iter()
                .zip(&f.scores)
                .zip(&f.labels)
                .map(|((id, &s), &l)| (id.as_str(), s, l))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    rows
}

fn paired_p(model: &ModelScores, reference: &ModelScores) -> Result<f64> {
    let a = pooled(model);
    let lookup: HashMap<&str, (f64, u8)> = pooled(reference).into_iter().map(|(id, s, l)| (id, (s, l))).collect();
    if lookup.len() != a.len() {
        return Err(StatsError::Pairing(format!(
            "{} has {} cases, {} has {}",
            model.name,
            a.len(),
            reference.name,
            lookup.len()
        )));
    }
    let mut b_scores = Vec::with_capacity(a.len());
    let mut b_labels = Vec::with_capacity(a.len());
    for (id, _, _) in &a {
        let &(s, l) = lookup
            .get(id)
            .ok_or_else(|| StatsError::Pairing(format!("case {id} missing from {}", reference.name)))?;
        b_scores.push(s);
        b_labels.push(l);
    }
    let set_a = ScoredSet::new(a.iter().map(|r| r.1).collect(), a.iter().map(|r| r.2).collect())?;
    let set_b = ScoredSet::new(b_scores, b_labels)?;
    Ok(delong_paired_test(&set_a, &set_b)?.p_value)
}

/// Summarises each model's folds (threshold 0.5) and, when `reference` names
/// one of the models, tests every other model against it.
pub fn report(models: &[ModelScores], reference: Option<&str>, mode: StdMode) -> Result<MetricsReport> {
    let ref_model = match reference {
        Some(name) => Some(
            models
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| StatsError::InvalidInput(format!("unknown reference model {name}")))?,
        ),
        None => None,
    };
    let mut rows = Vec::with_capacity(models.len());
    let mut fold_aucs = Vec::with_capacity(models.len());
    for m in models {
        if m.folds.is_empty() {
            return Err(StatsError::InsufficientData(format!("model {} has no folds", m.name)));
        }
        let (mut acc, mut f1, mut mcc, mut aucs) = (vec![], vec![], vec![], vec![]);
        for f in &m.folds {
            if f.case_ids.len() != f.scores.len() {
                return Err(StatsError::InvalidInput(format!("model {}: case ids and scores differ in length", m.name)));
            }
            let set = ScoredSet::new(f.scores.clone(), f.labels.clone())?;
            let b = binary_metrics(&ConfusionCounts::from_scores(set.scores(), set.labels(), 0.5))?;
            acc.push(b.acc);
            f1.push(b.f1);
            mcc.push(b.mcc);
            aucs.push(auc(&set)?);
        }
        let p = match ref_model {
            Some(r) if r.name != m.name => Some(paired_p(m, r)?),
            _ => None,
        };
        let (acc_mean, acc_std) = mean_std(&acc, mode);
        let (f1_mean, f1_std) = mean_std(&f1, mode);
        let (mcc_mean, mcc_std) = mean_std(&mcc, mode);
        let (auc_mean, auc_std) = mean_std(&aucs, mode);
        rows.push(ReportRow {
            model: m.name.clone(),
            folds: m.folds.len(),
            acc_mean,
            acc_std,
            f1_mean,
            f1_std,
            mcc_mean,
            mcc_std,
            auc_mean,
            auc_std,
            p_vs_reference: p,
            marker: p.map(significance_marker).unwrap_or("").to_string(),
        });
        fold_aucs.push(aucs);
    }
    let auc_anova = if fold_aucs.len() >= 2 && fold_aucs.iter().all(|a| a.len() >= 2) {
        Some(anova_posthoc(&fold_aucs)?)
    } else {
        None
    };
    Ok(MetricsReport {
        reference: ref_model.map(|m| m.name.clone()),
        std_mode: mode,
        rows,
        auc_anova,
    })
}

impl MetricsReport {
    /// Machine-readable CSV, one row per model.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Human-readable table with `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>15}  {:>15}  {:>15}  {:>15}  {:>10}",
            "model", "ACC", "F1", "MCC", "AUC", "p"
        );
        for r in &self.rows {
            let cell = |m: f64, s: f64| format!("{m:.3} ± {s:.3}");
            let p = match r.p_vs_reference {
                Some(p) => format!("{p:.4}{}", r.marker),
                None => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:>15}  {:>15}  {:>15}  {:>15}  {:>10}",
                r.model,
                cell(r.acc_mean, r.acc_std),
                cell(r.f1_mean, r.f1_std),
                cell(r.mcc_mean, r.mcc_std),
                cell(r.auc_mean, r.auc_std),
                p
            );
        }
        if let Some(a) = &self.auc_anova {
            let _ = writeln!(
                out,
                "AUC ANOVA: F({}, {}) = {:.4}, p = {:.4}",
                a.df_between, a.df_within, a.f, a.p_value
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_modes() {
        let aucs = [0.9, 0.92, 0.88, 0.91, 0.89];
        let (m, s) = mean_std(&aucs, StdMode::Population);
        assert!((m - 0.90).abs() < 1e-12);
        assert!((s - 0.014_142_1).abs() < 1e-7);
        let (_, s) = mean_std(&aucs, StdMode::Sample);
        assert!((s - 0.015_811_4).abs() < 1e-7);
    }

    #[test]
    fn markers() {
        assert_eq!(significance_marker(0.2), "");
        assert_eq!(significance_marker(0.04), "*");
        assert_eq!(significance_marker(0.0005), "**");
        assert_eq!(significance_marker(0.00005), "***");
    }

    fn model(name: &str, shift: f64) -> ModelScores {
        let folds = (0..3)
            .map(|f| {
                let ids: Vec<String> = (0..8).map(|i| format!("c{f}_{i}")).collect();
                let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
                let scores = (0..8)
                    .map(|i| (0.3 + 0.4 * (i % 2) as f64 + shift * ((i * 7 + f) % 5) as f64 / 5.0).clamp(0.0, 1.0))
                    .collect();
                FoldScores { case_ids: ids, scores, labels }
            })
            .collect();
        ModelScores { name: name.into(), folds }
    }

    #[test]
    fn report_rows_and_csv() {
        let models = [model("fused", 0.1), model("tafe", 0.5)];
        let r = report(&models, Some("fused"), StdMode::Sample).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows[0].p_vs_reference.is_none());
        let p = r.rows[1].p_vs_reference.unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(r.rows[0].auc_mean, 1.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("model,folds,acc_mean"));
        assert!(r.to_table().contains("±"));
        assert!(r.auc_anova.is_some());
    }

    #[test]
    fn unknown_reference() {
        assert!(report(&[model("a", 0.0)], Some("b"), StdMode::Sample).is_err());
    }
}

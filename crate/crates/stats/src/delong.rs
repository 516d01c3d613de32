//! DeLong's nonparametric variance of the AUC via structural components
//! (per-case placement values), and the paired comparison of two correlated
//! AUCs measured on the same cases.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::metrics::{midranks, ScoredSet};
use crate::{clamp_p, ComparisonResult, Result, StatsError};

/// Structural components of one score vector.
struct Placements {
    auc: f64,
    /// V10: for each positive, fraction of negatives it outranks.
    v10: Vec<f64>,
    /// V01: for each negative, fraction of positives that outrank it.
    v01: Vec<f64>,
}

fn placements(set: &ScoredSet) -> Result<Placements> {
    let (pos, neg) = set.require_both(2)?;
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all = midranks(set.scores());
    let pos_ranks = midranks(&pos);
    let neg_ranks = midranks(&neg);
    let mut v10 = Vec::with_capacity(pos.len());
    let mut v01 = Vec::with_capacity(neg.len());
    let (mut ip, mut ineg) = (0, 0);
    for (&r, &l) in all.iter().zip(set.labels()) {
        if l == 1 {
            // negatives below + half the ties = combined rank - rank among positives
            v10.push((r - pos_ranks[ip]) / n);
            ip += 1;
        } else {
            // positives above + half the ties
            v01.push(1.0 - (r - neg_ranks[ineg]) / m);
            ineg += 1;
        }
    }
    let auc = v10.iter().sum::<f64>() / m;
    Ok(Placements { auc, v10, v01 })
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

fn variance(p: &Placements) -> f64 {
    let var = sample_cov(&p.v10, &p.v10) / p.v10.len() as f64 + sample_cov(&p.v01, &p.v01) / p.v01.len() as f64;
    var.max(0.0)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn two_sided_p(z: f64) -> f64 {
    clamp_p(2.0 * std_normal().cdf(-z.abs()))
}

/// DeLong variance of the AUC of `set`.
pub fn delong_variance(set: &ScoredSet) -> Result<f64> {
    Ok(variance(&placements(set)?))
}

/// AUC with a DeLong confidence interval at `level` (e.g. 0.95), clipped to
/// `[0, 1]`. `statistic`/`p_value` test AUC = 0.5.
pub fn delong_ci(set: &ScoredSet, level: f64) -> Result<ComparisonResult> {
    if !(0.0 < level && level < 1.0) {
        return Err(StatsError::InvalidInput(format!("confidence level {level}")));
    }
    let p = placements(set)?;
    let se = variance(&p).sqrt();
    let z = std_normal().inverse_cdf(0.5 + level / 2.0);
    let (statistic, p_value) = if se > 0.0 {
        let s = (p.auc - 0.5) / se;
        (s, two_sided_p(s))
    } else if p.auc == 0.5 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(p.auc - 0.5), 0.0)
    };
    Ok(ComparisonResult {
        estimate: p.auc,
        statistic,
        p_value,
        ci_low: (p.auc - z * se).clamp(0.0, 1.0),
        ci_high: (p.auc + z * se).clamp(0.0, 1.0),
        method: "delong".into(),
    })
}

/// Paired DeLong test of AUC(a) − AUC(b) on the same cases and labels.
/// The 95% interval is for the AUC difference.
pub fn delong_paired_test(a: &ScoredSet, b: &ScoredSet) -> Result<ComparisonResult> {
    if a.len() != b.len() {
        return Err(StatsError::Pairing(format!("{} vs {} cases", a.len(), b.len())));
    }
    if a.labels() != b.labels() {
        return Err(StatsError::Pairing("labels differ".into()));
    }
    let pa = placements(a)?;
    let pb = placements(b)?;
    let diff = pa.auc - pb.auc;
    let method = "delong-paired".to_string();
    if a.scores() == b.scores() {
        return Ok(ComparisonResult {
            estimate: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            ci_low: 0.0,
            ci_high: 0.0,
            method,
        });
    }
    let (m, n) = (pa.v10.len() as f64, pa.v01.len() as f64);
    let var = sample_cov(&pa.v10, &pa.v10) / m + sample_cov(&pa.v01, &pa.v01) / n
        + sample_cov(&pb.v10, &pb.v10) / m
        + sample_cov(&pb.v01, &pb.v01) / n
        - 2.0 * (sample_cov(&pa.v10, &pb.v10) / m + sample_cov(&pa.v01, &pb.v01) / n);
    let se = var.max(0.0).sqrt();
    let (statistic, p_value) = if se > 0.0 {
        let z = diff / se;
        (z, two_sided_p(z))
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(diff), 0.0)
    };
    let zc = std_normal().inverse_cdf(0.975);
    Ok(ComparisonResult {
        estimate: diff,
        statistic,
        p_value,
        ci_low: diff - zc * se,
        ci_high: diff + zc * se,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// O(mn) placement values straight from the definition.
    fn brute_variance(s: &ScoredSet) -> f64 {
        let (pos, neg) = (s.positives(), s.negatives());
        let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        let v10: Vec<f64> = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64).collect();
        let v01: Vec<f64> = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64).collect();
        sample_cov(&v10, &v10) / v10.len() as f64 + sample_cov(&v01, &v01) / v01.len() as f64
    }

    #[test]
    fn placements_match_definition() {
        let s = set(&[0.1, 0.4, 0.35, 0.8, 0.4, 0.2, 0.9, 0.35], &[0, 0, 1, 1, 1, 0, 1, 0]);
        assert!((delong_variance(&s).unwrap() - brute_variance(&s)).abs() < 1e-15);
        let p = placements(&s).unwrap();
        assert_eq!(p.auc, crate::auc(&s).unwrap());
    }

    #[test]
    fn perfect_separation_clips_at_one() {
        let s = set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        let r = delong_ci(&s, 0.95).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.ci_high, 1.0);
        assert!(r.ci_low <= r.estimate);
    }

    #[test]
    fn identical_vectors_p_one() {
        let s = set(&[0.1, 0.7, 0.35, 0.8, 0.5], &[0, 0, 1, 1, 1]);
        let r = delong_paired_test(&s, &s).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn swap_negates_statistic() {
        let labels = [0, 0, 1, 1, 1, 0, 1, 0];
        let a = set(&[0.1, 0.4, 0.35, 0.8, 0.4, 0.2, 0.9, 0.35], &labels);
        let b = set(&[0.3, 0.1, 0.6, 0.5, 0.2, 0.7, 0.4, 0.1], &labels);
        let ab = delong_paired_test(&a, &b).unwrap();
        let ba = delong_paired_test(&b, &a).unwrap();
        assert!((ab.statistic + ba.statistic).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
    }

    #[test]
    fn pairing_errors() {
        let a = set(&[0.1, 0.7, 0.3, 0.8], &[0, 0, 1, 1]);
        let b = set(&[0.1, 0.7, 0.3, 0.8], &[0, 1, 0, 1]);
        assert!(matches!(delong_paired_test(&a, &b), Err(StatsError::Pairing(_))));
        let c = set(&[0.1, 0.7, 0.3], &[0, 1, 1]);
        assert!(matches!(delong_paired_test(&a, &c), Err(StatsError::Pairing(_))));
    }

    #[test]
    fn needs_two_per_class() {
        let s = set(&[0.1, 0.7, 0.3], &[0, 1, 1]);
        assert!(matches!(delong_ci(&s, 0.95), Err(StatsError::DegenerateLabels { .. })));
    }
}

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::{clamp_p, ComparisonResult, Result, StatsError};

/// One-way ANOVA with Bonferroni-corrected pairwise t-tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
    pub p_value: f64,
    /// `(i, j, result)` for every group pair `i < j`; `estimate` is
    /// `mean_i − mean_j`, `p_value` is Bonferroni-adjusted.
    pub pairwise: Vec<(usize, usize, ComparisonResult)>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Upper tail of the F distribution.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f.is_infinite() {
        return 0.0;
    }
    if f <= 0.0 {
        return 1.0;
    }
    let dist = FisherSnedecor::new(d1, d2).expect("positive degrees of freedom");
    clamp_p(dist.sf(f))
}

pub fn anova_posthoc(groups: &[Vec<f64>]) -> Result<AnovaTable> {
    if groups.len() < 2 {
        return Err(StatsError::InsufficientData(format!("{} group(s); need at least 2", groups.len())));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(StatsError::InsufficientData(format!("group {i} has {} sample(s); need at least 2", g.len())));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidInput("non-finite sample".into()));
    }
    let k = groups.len();
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let ss_between: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let (df_b, df_w) = (k - 1, n_total - k);
    let ms_b = ss_between / df_b as f64;
    let ms_w = ss_within / df_w as f64;
    let f = if ss_between == 0.0 {
        0.0
    } else if ms_w == 0.0 {
        f64::INFINITY
    } else {
        ms_b / ms_w
    };
    let p_value = f_sf(f, df_b as f64, df_w as f64);

    let n_pairs = k * (k - 1) / 2;
    let t_dist = StudentsT::new(0.0, 1.0, df_w as f64).expect("positive df");
    let t_crit = t_dist.inverse_cdf(0.975);
    let mut pairwise = Vec::with_capacity(n_pairs);
    for i in 0..k {
        for j in i + 1..k {
            let diff = means[i] - means[j];
            let se = (ms_w * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64)).sqrt();
            let (t, p) = if se > 0.0 {
                let t = diff / se;
                (t, 2.0 * t_dist.cdf(-t.abs()))
            } else if diff == 0.0 {
                (0.0, 1.0)
            } else {
                (f64::INFINITY.copysign(diff), 0.0)
            };
            pairwise.push((
                i,
                j,
                ComparisonResult {
                    estimate: diff,
                    statistic: t,
                    p_value: clamp_p((p * n_pairs as f64).min(1.0)),
                    ci_low: diff - t_crit * se,
                    ci_high: diff + t_crit * se,
                    method: "pooled-t-bonferroni".into(),
                },
            ));
        }
    }
    Ok(AnovaTable {
        f,
        df_between: df_b,
        df_within: df_w,
        ss_between,
        ss_within,
        p_value,
        pairwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_example() {
        let t = anova_posthoc(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((t.ss_between - 13.5).abs() < 1e-12);
        assert!((t.ss_within - 4.0).abs() < 1e-12);
        assert_eq!((t.df_between, t.df_within), (1, 4));
        assert!((t.f - 13.5).abs() < 1e-12);
        // scipy.stats.f.sf(13.5, 1, 4)
        assert!((t.p_value - 0.021_311_641_128_756_72).abs() < 1e-6);
        // with two groups the pooled t-test is the ANOVA: t^2 = F, same p
        let (_, _, pair) = &t.pairwise[0];
        assert!((pair.statistic.powi(2) - 13.5).abs() < 1e-9);
        assert!((pair.p_value - t.p_value).abs() < 1e-6);
    }

    #[test]
    fn identical_groups() {
        let t = anova_posthoc(&[vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 4.0]]).unwrap();
        assert_eq!(t.f, 0.0);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn bonferroni_caps_at_one() {
        let t = anova_posthoc(&[vec![1.0, 2.0], vec![1.1, 2.1], vec![0.9, 2.2]]).unwrap();
        assert_eq!(t.pairwise.len(), 3);
        for (_, _, r) in &t.pairwise {
            assert!(r.p_value <= 1.0 && r.p_value >= 0.0);
            assert!(r.ci_low <= r.estimate && r.estimate <= r.ci_high);
        }
    }

    #[test]
    fn insufficient_data() {
        assert!(anova_posthoc(&[vec![1.0, 2.0]]).is_err());
        assert!(anova_posthoc(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}

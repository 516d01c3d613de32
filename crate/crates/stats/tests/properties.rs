use idhnet_stats::{anova_posthoc, auc, binary_metrics, delong_ci, delong_paired_test, ConfusionCounts, ScoredSet};
use proptest::prelude::*;

fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (4usize..40)
        .prop_flat_map(|n| (prop::collection::vec(0u8..6, n), prop::collection::vec(0u8..2, n)))
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 5.0).collect(), l))
}

proptest! {
    #[test]
    fn auc_flips_under_label_swap((scores, labels) in scored_set()) {
        let a = auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let swapped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let b = auc(&ScoredSet::new(scores, swapped).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_to_monotone_transform((scores, labels) in scored_set()) {
        let a = auc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let b = auc(&ScoredSet::new(t, labels).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mcc_symmetric_under_class_swap(tp in 0u64..30, fp in 0u64..30, tn in 0u64..30, fn_ in 0u64..30) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let a = binary_metrics(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
        let b = binary_metrics(&ConfusionCounts { tp: tn, fp: fn_, tn: tp, fn_: fp }).unwrap();
        prop_assert!((a.mcc - b.mcc).abs() < 1e-12);
        prop_assert!((a.acc - b.acc).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a.mcc));
        prop_assert!((0.0..=1.0).contains(&a.f1));
    }

    #[test]
    fn delong_outputs_in_range((scores, labels) in scored_set()) {
        let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        prop_assume!(set.positives().len() >= 2 && set.negatives().len() >= 2);
        let ci = delong_ci(&set, 0.95).unwrap();
        prop_assert!(0.0 <= ci.ci_low && ci.ci_low <= ci.estimate && ci.estimate <= ci.ci_high && ci.ci_high <= 1.0);
        prop_assert!((0.0..=1.0).contains(&ci.p_value));
        let rev: Vec<f64> = scores.iter().rev().copied().collect();
        let other = ScoredSet::new(rev, labels).unwrap();
        let t = delong_paired_test(&set, &other).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_value));
        let back = delong_paired_test(&other, &set).unwrap();
        prop_assert!((t.statistic + back.statistic).abs() < 1e-9 || t.statistic.is_infinite());
    }

    #[test]
    fn anova_p_in_unit_interval(groups in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2..8), 2..5)) {
        let t = anova_posthoc(&groups).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_value));
        prop_assert!(t.f >= 0.0);
        for (_, _, r) in &t.pairwise {
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }
    }

    #[test]
    fn anova_shift_invariant(groups in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2..8), 2..5), c in -10.0f64..10.0) {
        let a = anova_posthoc(&groups).unwrap();
        let shifted: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| v + c).collect()).collect();
        let b = anova_posthoc(&shifted).unwrap();
        prop_assert!((a.p_value - b.p_value).abs() < 1e-6);
    }
}

mod support;

use idhnet::augment::{augment, flip, AugmentConfig};
use idhnet::trainer::*;
use idhnet::volume::Case;
use idhnet::Error;
use idhnet_tensor::SeededRng;
use proptest::prelude::*;
use support::{phantoms, tiny_experiment};

#[test]
fn epoch_cap_and_determinism() {
    let cases = phantoms(8, 1, 0.2);
    let mut exp = tiny_experiment();
    exp.train.max_epochs = 2;
    exp.train.patience = 5;
    let a = train_fold(&cases[..6], &cases[6..], &exp, 0, None).unwrap();
    assert_eq!(a.history.len(), 2);
    assert_eq!(a.epochs_run, 2);
    let b = train_fold(&cases[..6], &cases[6..], &exp, 0, None).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        assert_eq!(x.val_acc.to_bits(), y.val_acc.to_bits());
    }
    assert_eq!(a.val_predictions, b.val_predictions);
}

#[test]
fn writes_history_and_checkpoint() {
    let cases = phantoms(6, 2, 0.2);
    let mut exp = tiny_experiment();
    exp.train.max_epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let r = train_fold(&cases[..4], &cases[4..], &exp, 0, Some(dir.path())).unwrap();
    let hist = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert!(hist.starts_with("{\"epoch\":1,\"L_total\":"));
    let ens = predict_ensemble_files(&[r.checkpoint.unwrap()], &cases[4..], 2).unwrap();
    let direct = predict_cases(&r.network, &cases[4..], 2).unwrap();
    for (m, d) in ens.mean.iter().zip(&direct) {
        assert_eq!(m[1], d.prob);
    }
}

#[test]
fn training_loss_decreases_on_noiseless_phantoms() {
    let cases = phantoms(16, 3, 0.0);
    for seed in 0..5 {
        let mut exp = tiny_experiment();
        exp.train.seed = seed;
        exp.train.max_epochs = 4;
        exp.train.patience = 10;
        let r = train_fold(&cases[..12], &cases[12..], &exp, 0, None).unwrap();
        let (first, last) = (r.history[0].l_total, r.history.last().unwrap().l_total);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn split_errors() {
    let cases = phantoms(4, 1, 0.2);
    let exp = tiny_experiment();
    assert!(matches!(train_fold(&cases, &[], &exp, 0, None), Err(Error::EmptySplit(_))));
    assert!(matches!(train_fold(&cases[..3], &cases[2..], &exp, 0, None), Err(Error::Data(_))));
    let mut unlabeled = cases.clone();
    unlabeled[0].idh_label = None;
    assert!(matches!(train_fold(&unlabeled[..2], &unlabeled[2..], &exp, 0, None), Err(Error::MissingLabel(_))));
}

#[test]
fn non_finite_loss_is_divergence() {
    let mut cases = phantoms(4, 1, 0.2);
    cases[0].sequences[0].data[5] = f32::NAN;
    cases[1].sequences[0].data[5] = f32::NAN;
    let exp = tiny_experiment();
    let r = train_fold(&cases[..2], &cases[2..], &exp, 0, None);
    assert!(matches!(r, Err(Error::Divergence(_))), "{:?}", r.map(|f| f.history));
}

#[test]
fn fold_examples() {
    let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let folds = stratified_folds(&labels, 5, 3).unwrap();
    for f in 0..5 {
        let members: Vec<usize> = (0..10).filter(|&i| folds[i] == f).collect();
        assert_eq!(members.len(), 2);
        assert!(members.iter().filter(|&&i| labels[i] == 1).count() <= 1);
    }
    assert!(matches!(stratified_folds(&labels, 1, 0), Err(Error::Stratification(_))));
    assert!(matches!(stratified_folds(&labels, 11, 0), Err(Error::Stratification(_))));
}

#[test]
fn cross_validation_needs_enough_minority_cases() {
    let cases = phantoms(4, 1, 0.2);
    let exp = tiny_experiment();
    assert!(matches!(cross_validate(&cases, 3, &exp, 1, None), Err(Error::Stratification(_))));
}

#[test]
fn cross_validation_is_independent_of_jobs() {
    let cases = phantoms(8, 5, 0.2);
    let mut exp = tiny_experiment();
    exp.train.max_epochs = 1;
    let a = cross_validate(&cases, 2, &exp, 1, None).unwrap();
    let b = cross_validate(&cases, 2, &exp, 2, None).unwrap();
    assert_eq!(a.folds.len(), 2);
    for (x, y) in a.folds.iter().zip(&b.folds) {
        assert_eq!(x.val_predictions, y.val_predictions);
    }
    let mut seen: Vec<String> = a.folds.iter().flat_map(|f| f.val_predictions.iter().map(|p| p.case_id.clone())).collect();
    seen.sort();
    let mut all: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    all.sort();
    assert_eq!(seen, all);
}

#[test]
fn ensemble_examples() {
    let cases = phantoms(4, 1, 0.2);
    let exp = tiny_experiment();
    let net: idhnet::model::Network<f32> = idhnet::model::Network::new(&exp.model_config(), 3).unwrap();
    let single = predict_ensemble(std::slice::from_ref(&net), &cases, 2).unwrap();
    let five = predict_ensemble(&vec![net.clone(); 5], &cases, 2).unwrap();
    for (a, b) in single.mean.iter().flatten().zip(five.mean.iter().flatten()) {
        assert!((a - b).abs() < 1e-15);
    }
    let refs: Vec<&Case> = cases.iter().collect();
    assert_eq!(single.mean, net.predict(&refs, 2).unwrap());
    let other: idhnet::model::Network<f32> = idhnet::model::Network::new(&exp.model_config(), 4).unwrap();
    let mixed = predict_ensemble(&[net.clone(), other], &cases, 2).unwrap();
    for row in &mixed.mean {
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut cfg = exp.model_config();
    cfg.cmd.gamma = 3.0;
    let foreign: idhnet::model::Network<f32> = idhnet::model::Network::new(&cfg, 4).unwrap();
    assert!(matches!(predict_ensemble(&[net, foreign], &cases, 2), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn ablation_grids() {
    assert_eq!(module_grid().len(), 3);
    let names: Vec<String> = depth_grid().into_iter().map(|c| c.name).collect();
    assert_eq!(names.len(), 8);
    assert!(names.contains(&"TAFE-1".to_string()) && names.contains(&"SwinT-4".to_string()));
    let cases = phantoms(4, 1, 0.2);
    let table = run_ablation(&cases, &[], 2, &tiny_experiment(), 1, None).unwrap();
    assert!(table.rows.is_empty() && table.fold_rows.is_empty());
    let mut exp = tiny_experiment();
    exp.train.max_epochs = 1;
    let table = run_ablation(&cases, &module_grid(), 2, &exp, 1, None).unwrap();
    let rows: Vec<&str> = table.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(rows, ["TAFE", "CMD", "TAFE+CMD"]);
    assert_eq!(table.fold_rows.len(), 6);
    assert!(summary_csv(&table.rows).starts_with("config,folds,acc_mean,acc_std,f1_mean,f1_std,mcc_mean,mcc_std,auc_mean,auc_std\n"));
}

#[test]
fn augmentation_contracts() {
    let c = phantoms(2, 1, 0.2).remove(0);
    let mut rng = SeededRng::new(1);
    assert_eq!(augment(&c, &AugmentConfig::disabled(), &mut rng), c);
    assert_eq!(flip(&flip(&c, 1), 1), c);
    let tumor = c.mask.as_ref().unwrap().tumor_voxels();
    let geometric = AugmentConfig { intensity_scale: false, ..Default::default() };
    for seed in 0..10 {
        let a = augment(&c, &geometric, &mut SeededRng::new(seed));
        assert_eq!(a.mask.as_ref().unwrap().tumor_voxels(), tumor);
        assert_eq!(a, augment(&c, &geometric, &mut SeededRng::new(seed)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn early_stopping_bound(trace in prop::collection::vec(0.0f64..1.0, 1..40), patience in 1usize..8) {
        let (run, best) = run_early_stopping(&trace, patience, 100);
        prop_assert!(run - best <= patience);
        prop_assert!(best >= 1 && best <= run);
    }

    #[test]
    fn folds_partition_cases(labels in prop::collection::vec(0u8..2, 4..40), k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(k <= labels.len());
        let folds = stratified_folds(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), labels.len());
        let mut sizes = vec![0usize; k];
        for &f in &folds {
            prop_assert!(f < k);
            sizes[f] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for class in 0..2u8 {
            let mut per = vec![0usize; k];
            for (i, &f) in folds.iter().enumerate() {
                if labels[i] == class { per[f] += 1; }
            }
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }
}

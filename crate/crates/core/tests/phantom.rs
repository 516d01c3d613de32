use idhnet::phantom::*;
use idhnet::volume::*;
use idhnet::Error;

fn spec(mismatch: bool) -> PhantomSpec {
    PhantomSpec {
        dims: [24; 3],
        tumor_center: [12.0; 3],
        tumor_radii: [6.0, 5.0, 5.5],
        mismatch,
        mismatch_contrast: 2.0,
        noise_sigma: 0.0,
        boundary_sharpness: 8.0,
        rim_thickness: 1.5,
        seed: 11,
    }
}

fn core_mean(c: &Case, s: Sequence) -> f64 {
    let m = c.mask.as_ref().unwrap();
    let idx: Vec<usize> = (0..m.data.len()).filter(|&i| m.data[i] == LABEL_CORE).collect();
    idx.iter().map(|&i| c.sequence(s).data[i] as f64).sum::<f64>() / idx.len() as f64
}

#[test]
fn seeded_determinism() {
    let mut s = spec(true);
    s.noise_sigma = 0.3;
    assert_eq!(generate_phantom(&s, "a").unwrap(), generate_phantom(&s, "a").unwrap());
}

#[test]
fn noiseless_mismatch_gap() {
    let c = generate_phantom(&spec(true), "a").unwrap();
    let gap = core_mean(&c, Sequence::T2) - core_mean(&c, Sequence::Flair);
    assert!((gap - 4.0).abs() < 1e-4, "{gap}");
}

#[test]
fn tumor_out_of_bounds() {
    let mut s = spec(true);
    s.tumor_radii = [13.0, 5.0, 5.0];
    assert!(matches!(generate_phantom(&s, "a"), Err(Error::TumorOutOfBounds(_))));
}

#[test]
fn dataset_counts_and_errors() {
    let cfg = DatasetConfig { n_cases: 10, mutant_fraction: 0.3, dims: [16; 3], radius_range: [2.5, 4.0], ..Default::default() };
    let cases = cfg.generate().unwrap();
    assert_eq!(cases.iter().filter(|c| c.idh_label == Some(1)).count(), 3);
    assert!(DatasetConfig { n_cases: 1, ..cfg.clone() }.generate().is_err());
    for c in &cases {
        let frac = c.mask.as_ref().unwrap().tumor_voxels() as f64 / voxel_count(c.dims()) as f64;
        assert!(frac > 0.0 && frac < 0.5);
        assert!(c.sequences.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn dataset_on_disk_is_reproducible() {
    let cfg = DatasetConfig { n_cases: 4, dims: [16; 3], radius_range: [2.5, 4.0], master_seed: 7, ..Default::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&cfg, a.path()).unwrap();
    generate_dataset(&cfg, b.path()).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
    for row in &ma.rows {
        assert_eq!(read(a.path(), &format!("{}/flair.raw", row.bundle_path.display())), read(b.path(), &format!("{}/flair.raw", row.bundle_path.display())));
    }
    let loaded = load_manifest(&a.path().join(MANIFEST_FILE)).unwrap().load_all().unwrap();
    assert_eq!(loaded, cfg.generate().unwrap());
}

#[test]
fn oracle_examples() {
    let c = generate_phantom(&spec(true), "a").unwrap();
    assert!(mismatch_oracle(&c).unwrap() > 0.0);
    let mut same = c.clone();
    *same.sequence_mut(Sequence::Flair) = c.sequence(Sequence::T2).clone();
    assert_eq!(mismatch_oracle(&same).unwrap(), 0.0);
    let mut empty = c.clone();
    empty.mask = Some(LabelVolume::zeros(c.dims()));
    assert!(matches!(mismatch_oracle(&empty), Err(Error::EmptyRegion(_))));
}

#[test]
fn oracle_separates_classes() {
    let cfg = DatasetConfig { n_cases: 30, mutant_fraction: 0.5, dims: [24; 3], radius_range: [3.0, 5.0], noise_sigma: 0.45, mismatch_contrast: [0.9, 0.9], ..Default::default() };
    let mut mutant = Vec::new();
    let mut wild = Vec::new();
    for c in cfg.generate().unwrap() {
        let s = mismatch_oracle(&c).unwrap();
        if c.idh_label == Some(1) { mutant.push(s) } else { wild.push(s) }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&mut mutant) > median(&mut wild));
}

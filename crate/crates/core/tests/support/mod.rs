#![allow(dead_code)]

use idhnet::phantom::DatasetConfig;
use idhnet::trainer::Experiment;
use idhnet::volume::{preprocess, Case, NormRegion};

pub fn tiny_experiment() -> Experiment {
    let mut e = Experiment::default();
    e.backbone.embed_dim = 4;
    e.backbone.input_size = [16; 3];
    e.tafe.head_hidden = 16;
    e.cmd.conv_channels = 8;
    e.cmd.head_hidden = 8;
    e.train.learning_rate = 1e-3;
    e.train.max_epochs = 3;
    e
}

pub fn phantoms(n: usize, seed: u64, noise: f64) -> Vec<Case> {
    let cfg = DatasetConfig {
        n_cases: n,
        mutant_fraction: 0.5,
        dims: [16; 3],
        radius_range: [3.0, 4.5],
        noise_sigma: noise,
        master_seed: seed,
        ..Default::default()
    };
    cfg.generate().unwrap().iter().map(|c| preprocess(c, NormRegion::NonzeroVoxels, [16; 3])).collect()
}

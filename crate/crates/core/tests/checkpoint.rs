use idhnet::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use idhnet::model::{ModelConfig, Network};
use idhnet::Error;
use idhnet_tensor::{SeededRng, Tensor};

fn input() -> Tensor<f32> {
    let mut rng = SeededRng::new(1);
    Tensor::new(&[1, 4, 32, 32, 32], (0..4 * 32 * 32 * 32).map(|_| rng.normal() as f32).collect())
}

#[test]
fn save_then_load_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net: Network<f32> = Network::new(&ModelConfig::default(), 3).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let loaded = read_checkpoint(&path).unwrap().into_network().unwrap();
    assert_eq!(loaded.predict_tensor(input()), net.predict_tensor(input()));
    let mut fresh: Network<f32> = Network::new(&ModelConfig::default(), 99).unwrap();
    let report = load_checkpoint(&mut fresh, &path, true).unwrap();
    assert!(report.unmatched.is_empty() && report.unused.is_empty());
    assert_eq!(fresh.predict_tensor(input()), net.predict_tensor(input()));
}

#[test]
fn wrong_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Network::<f32>::new(&ModelConfig::default(), 3).unwrap(), &path).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.backbone.embed_dim = 12;
    let mut other: Network<f32> = Network::new(&cfg, 0).unwrap();
    assert!(matches!(load_checkpoint(&mut other, &path, true), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn partial_load_reports_unmatched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut cfg = ModelConfig::default();
    cfg.modules.cmd_on = false;
    let src: Network<f32> = Network::new(&cfg, 3).unwrap();
    save_checkpoint(&src, &path).unwrap();
    let mut full: Network<f32> = Network::new(&ModelConfig::default(), 4).unwrap();
    let before = full.params.by_name("cmd.head.fc1.weight").unwrap().clone();
    let report = load_checkpoint(&mut full, &path, false).unwrap();
    assert!(report.unmatched.iter().any(|n| n == "cmd.head.fc1.weight"));
    assert!(report.unmatched.iter().any(|n| n == "fusion.linear.weight"));
    assert_eq!(full.params.by_name("cmd.head.fc1.weight").unwrap(), &before);
    assert_eq!(full.params.by_name("tafe.head.fc1.weight").unwrap(), src.params.by_name("tafe.head.fc1.weight").unwrap());
}

#[test]
fn truncated_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Network::<f32>::new(&ModelConfig::default(), 3).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(read_checkpoint(&path).is_err());
}

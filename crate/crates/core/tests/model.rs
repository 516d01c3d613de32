use idhnet::backbone::{tumor_probability, BackboneConfig, BlockKind};
use idhnet::cmd::{apply_mismatch, differential, soft_gate};
use idhnet::gradcheck::{check_gradients, jitter_params, GradCheckOptions, Objective};
use idhnet::loss::{ce_loss, dice_from_probs, dice_loss, total_loss, LossConfig};
use idhnet::model::{ModelConfig, Network};
use idhnet::tafe::{aggregate, gap, TafeConfig};
use idhnet::Error;
use idhnet_tensor::{Graph, SeededRng, Tensor};
use proptest::prelude::*;

fn tiny(kind: BlockKind) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.embed_dim = 4;
    cfg.backbone.input_size = [16; 3];
    cfg.backbone.block_kind = kind;
    cfg
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
}

fn random_mask(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| rng.below(4) as u8).collect()
}

fn zero_params(net: &mut Network<f64>, prefix: &str) {
    for (name, t) in net.params.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn pyramid_shapes_default_config() {
    let cfg = ModelConfig::default();
    let net: Network<f64> = Network::new(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let p = net.params.bind_frozen(&mut g);
    let x = g.constant(random_input(&[1, 4, 32, 32, 32], 1));
    let out = net.forward(&mut g, &p, x, None);
    let shapes: Vec<Vec<usize>> = out.pyramid.0.iter().map(|&v| g.shape(v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 8, 16, 16, 16], vec![1, 16, 8, 8, 8], vec![1, 32, 4, 4, 4], vec![1, 64, 2, 2, 2]]);
    assert_eq!(g.shape(out.seg_logits.unwrap()), &[1, 4, 32, 32, 32]);
    assert_eq!(g.shape(out.logits), &[1, 2]);
}

#[test]
fn conv_residual_blocks_keep_shapes() {
    for kind in [BlockKind::Swin, BlockKind::ConvResidual] {
        let net: Network<f64> = Network::new(&tiny(kind), 0).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let x = g.constant(random_input(&[2, 4, 16, 16, 16], 1));
        let out = net.forward(&mut g, &p, x, None);
        let shapes: Vec<Vec<usize>> = out.pyramid.0.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes[3], vec![2, 32, 1, 1, 1]);
        assert_eq!(g.shape(out.seg_logits.unwrap()), &[2, 4, 16, 16, 16]);
    }
}

#[test]
fn zero_input_is_finite_and_inputs_matter() {
    let net: Network<f64> = Network::new(&tiny(BlockKind::Swin), 3).unwrap();
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let out = net.forward(&mut g, &p, xv, None);
        (g.value(out.pyramid.0[3]).clone(), g.value(out.logits).clone(), g.value(out.tumor_prob.unwrap()).clone(), g.value(out.seg_logits.unwrap()).clone())
    };
    let (x4, logits, prob, _) = run(Tensor::zeros(&[1, 4, 16, 16, 16]));
    assert!(x4.is_finite() && logits.is_finite() && prob.is_finite());
    let (a, _, prob, seg) = run(random_input(&[1, 4, 16, 16, 16], 5));
    let (b, ..) = run(random_input(&[1, 4, 16, 16, 16], 6));
    assert!(a.max_abs_diff(&b) > 0.0);
    let s = 16 * 16 * 16;
    for i in 0..s {
        let row: Vec<f64> = (0..4).map(|k| seg.data()[k * s + i]).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let bg = (row[0] - m).exp() / z;
        let t = prob.data()[i];
        assert!((0.0..=1.0).contains(&t));
        assert!((t + bg - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tumor_probability_matches_background_complement() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(&[1, 4, 1, 1, 1], vec![0.0, 0.0, 0.0, 0.0]));
    let t = tumor_probability(&mut g, s);
    assert!((g.value(t).item() - 0.75).abs() < 1e-15);
}

#[test]
fn gap_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2, 3, 4, 4, 4], 1.5));
    let out = gap(&mut g, c);
    assert_eq!(g.shape(out), &[2, 3]);
    assert!(g.value(out).data().iter().all(|&v| v == 1.5));
    let a = g.constant(random_input(&[2, 3, 4, 4, 4], 1));
    let b = g.constant(random_input(&[2, 3, 4, 4, 4], 2));
    let ab = g.add(a, b);
    let (ga, gb, gab) = (gap(&mut g, a), gap(&mut g, b), gap(&mut g, ab));
    let sum = g.value(ga).zip_map(g.value(gb), |x, y| x + y);
    assert!(sum.max_abs_diff(g.value(gab)) < 1e-12);
}

#[test]
fn tafe_widths() {
    let b = BackboneConfig::default();
    let w = |depth| TafeConfig { depth, ..Default::default() }.feature_width(&b);
    assert_eq!(w(1), 64);
    assert_eq!(w(4), 120);
    for depth in 1..=4 {
        let cfg = TafeConfig { depth, ..Default::default() };
        let expect: usize = (5 - depth..=4).map(|i| 8 << (i - 1)).sum();
        assert_eq!(cfg.feature_width(&b), expect);
    }
}

fn tafe_logits(net: &Network<f64>, x: &Tensor<f64>, rng: Option<&mut SeededRng>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = net.params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &p, xv, rng);
    g.value(out.c_tafe.unwrap()).clone()
}

#[test]
fn tafe_head_examples() {
    let mut cfg = tiny(BlockKind::Swin);
    cfg.modules.cmd_on = false;
    let mut net: Network<f64> = Network::new(&cfg, 9).unwrap();
    let x = random_input(&[2, 4, 16, 16, 16], 3);
    assert_eq!(tafe_logits(&net, &x, None), tafe_logits(&net, &x, None));
    let a = tafe_logits(&net, &x, Some(&mut SeededRng::new(4)));
    let b = tafe_logits(&net, &x, Some(&mut SeededRng::new(4)));
    assert_eq!(a, b);
    let mut swapped = x.data()[x.numel() / 2..].to_vec();
    swapped.extend_from_slice(&x.data()[..x.numel() / 2]);
    let y = tafe_logits(&net, &Tensor::new(x.shape(), swapped), None);
    let base = tafe_logits(&net, &x, None);
    assert_eq!(&y.data()[..2], &base.data()[2..]);
    zero_params(&mut net, "tafe.head");
    assert!(tafe_logits(&net, &x, None).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_and_differential_examples() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(random_input(&[1, 1, 2, 2, 2], 1));
    let one = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let zero = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
    let a = soft_gate(&mut g, v, one, 0.1).unwrap();
    assert_eq!(g.value(a), g.value(v));
    let b = soft_gate(&mut g, v, zero, 0.1).unwrap();
    assert!(g.value(b).max_abs_diff(&g.value(v).map(|x| 0.1 * x)) < 1e-15);
    let c = soft_gate(&mut g, v, zero, 0.999_999).unwrap();
    assert!(g.value(c).max_abs_diff(g.value(v)) < 1e-5);

    let f = g.constant(Tensor::new(&[1, 1, 1, 1, 1], vec![0.75]));
    let h = g.constant(Tensor::new(&[1, 1, 1, 1, 1], vec![0.25]));
    let d = differential(&mut g, f, h, 2.0).unwrap();
    assert_eq!(g.value(d).item(), 1.0);
    let e = differential(&mut g, h, f, 2.0).unwrap();
    assert_eq!(g.value(e).item(), -1.0);
    let same = differential(&mut g, f, f, 2.0).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    assert!(matches!(differential(&mut g, f, h, 1.0), Err(Error::Config(_))));
    let d3 = differential(&mut g, f, h, 6.0).unwrap();
    assert_eq!(g.value(d3).item(), 3.0 * g.value(d).item());
}

#[test]
fn residual_reweighting() {
    let mut g = Graph::<f64>::new();
    let f = g.constant(random_input(&[1, 2, 2, 2, 2], 1));
    let zero = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    for (ca, expect) in [(0.0, 1.0), (1.0, 2.0)] {
        let cav = g.constant(Tensor::full(&[1, 2], ca));
        let sa = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let (_, t2, fl) = apply_mismatch(&mut g, f, zero, cav, sa);
        assert!(g.value(t2).max_abs_diff(&g.value(f).map(|x| expect * x)) < 1e-15);
        assert!(g.value(fl).data().iter().all(|&v| v == 0.0));
    }
}

fn cmd_pass(net: &Network<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let p = net.params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &p, xv, None);
    let m = out.cmd.unwrap();
    (g.value(m.ca).clone(), g.value(m.sa).clone(), g.value(m.logits).clone())
}

#[test]
fn cmd_attention_examples() {
    let mut cfg = tiny(BlockKind::Swin);
    cfg.modules.tafe_on = false;
    let mut net: Network<f64> = Network::new(&cfg, 2).unwrap();
    let x = random_input(&[2, 4, 16, 16, 16], 8);
    let (ca, sa, logits) = cmd_pass(&net, &x);
    assert_eq!(ca.shape(), &[2, 16]);
    assert_eq!(sa.shape(), &[2, 1, 4, 4, 4]);
    assert_eq!(logits.shape(), &[2, 2]);
    assert!(ca.data().iter().chain(sa.data()).all(|&v| v > 0.0 && v < 1.0));
    zero_params(&mut net, "cmd.channel_att");
    zero_params(&mut net, "cmd.spatial_att");
    let (ca, sa, _) = cmd_pass(&net, &x);
    assert!(ca.data().iter().chain(sa.data()).all(|&v| v == 0.5));
    zero_params(&mut net, "cmd.head");
    assert!(cmd_pass(&net, &x).2.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cmd_stream_order_matters() {
    let mut cfg = tiny(BlockKind::Swin);
    cfg.modules.tafe_on = false;
    let net: Network<f64> = Network::new(&cfg, 2).unwrap();
    let x = random_input(&[1, 4, 16, 16, 16], 8);
    let s = 16 * 16 * 16;
    let mut swapped = x.data().to_vec();
    let (t2, fl) = (x.data()[2 * s..3 * s].to_vec(), x.data()[3 * s..].to_vec());
    swapped[2 * s..3 * s].copy_from_slice(&fl);
    swapped[3 * s..].copy_from_slice(&t2);
    let a = cmd_pass(&net, &x).2;
    let b = cmd_pass(&net, &Tensor::new(x.shape(), swapped)).2;
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn fusion_examples() {
    let cfg = tiny(BlockKind::Swin);
    let mut net: Network<f64> = Network::new(&cfg, 1).unwrap();
    assert_eq!(net.params.by_name("fusion.linear.weight").unwrap().shape(), &[2, 4]);
    let x = random_input(&[1, 4, 16, 16, 16], 2);
    let run = |net: &Network<f64>| {
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, &p, xv, None);
        (g.value(out.c_tafe.unwrap()).clone(), g.value(out.logits).clone())
    };
    *net.params.by_name_mut("fusion.linear.weight").unwrap() = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let (c_tafe, fused) = run(&net);
    assert_eq!(c_tafe, fused);
    zero_params(&mut net, "fusion");
    assert!(run(&net).1.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dice_examples() {
    let labels = [0u8, 1, 2, 3, 1, 0];
    let onehot: Vec<f64> = (0..4).flat_map(|k| labels.iter().map(move |&l| (l as usize == k) as u8 as f64)).collect();
    assert!(dice_from_probs(&onehot, 1, 4, &labels, 1e-5) < 1e-12);
    let disjoint: Vec<f64> = (0..4).flat_map(|k| labels.iter().map(move |&l| (l as usize == (k + 1) % 4) as u8 as f64)).collect();
    assert!(dice_from_probs(&disjoint, 1, 4, &labels, 1e-5) > 1.0 - 1e-5);
    let p = [1.0, 1.0, 0.0, 0.0];
    let one_channel = [0u8, 1, 0, 1];
    let l = dice_from_probs(&p, 1, 1, &one_channel.map(|v| if v == 1 { 1 } else { 0 }).map(|v| 1 - v), 0.0);
    assert!((l - 0.5).abs() < 1e-12, "{l}");
}

#[test]
fn ce_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 2]));
    let l = ce_loss(&mut g, z, &[1], None).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let m = g.constant(Tensor::new(&[1, 2], vec![0.0, 20.0]));
    let l = ce_loss(&mut g, m, &[1], None).unwrap();
    assert!(g.value(l).item() < 1e-8);
    let r = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.4]));
    let plain = ce_loss(&mut g, r, &[1], None).unwrap();
    let weighted = ce_loss(&mut g, r, &[1], Some(&[1.0, 3.0])).unwrap();
    assert!((g.value(weighted).item() - 3.0 * g.value(plain).item()).abs() < 1e-14);
}

#[test]
fn total_loss_weights() {
    let mut g = Graph::<f64>::new();
    let seg = g.constant(random_input(&[1, 4, 2, 2, 2], 1));
    let mask = random_mask(8, 2);
    let logits = g.constant(Tensor::new(&[1, 2], vec![0.2, -0.1]));
    let cfg = |alpha, beta| LossConfig { alpha, beta, ..Default::default() };
    let t = total_loss(&mut g, Some((seg, &mask)), logits, &[0], &cfg(0.0, 1.0)).unwrap();
    assert_eq!(g.value(t.total).item(), g.value(t.cla).item());
    let t = total_loss(&mut g, Some((seg, &mask)), logits, &[0], &cfg(0.5, 0.0)).unwrap();
    assert!((g.value(t.total).item() - 0.5 * g.value(t.seg.unwrap()).item()).abs() < 1e-15);
    let d = dice_loss(&mut g, seg, &mask, 1e-5).unwrap();
    let dv = g.value(d).item();
    assert!((0.0..=1.0).contains(&dv));
    let base = total_loss(&mut g, Some((seg, &mask)), logits, &[0], &cfg(0.5, 1.0)).unwrap();
    let scaled = total_loss(&mut g, Some((seg, &mask)), logits, &[0], &cfg(1.5, 3.0)).unwrap();
    assert!((3.0 * g.value(base.total).item() - g.value(scaled.total).item()).abs() < 1e-14);
}

#[test]
fn total_gradient_is_weighted_sum() {
    let cfg = tiny(BlockKind::Swin);
    let net: Network<f64> = Network::new(&cfg, 4).unwrap();
    let x = random_input(&[1, 4, 16, 16, 16], 3);
    let mask = random_mask(4096, 4);
    let lc = LossConfig { alpha: 0.7, beta: 1.3, ..Default::default() };
    let mut g = Graph::new();
    let p = net.params.bind(&mut g);
    let xv = g.constant(x);
    let out = net.forward(&mut g, &p, xv, None);
    let t = net.loss(&mut g, &out, Some(&mask), &[1], &lc).unwrap();
    let gt = p.gradients(&g.backward(t.total), &net.params);
    let gs = p.gradients(&g.backward(t.seg.unwrap()), &net.params);
    let gc = p.gradients(&g.backward(t.cla), &net.params);
    for ((a, s), c) in gt.iter().zip(&gs).zip(&gc) {
        let expect = s.zip_map(c, |s, c| 0.7 * s + 1.3 * c);
        assert!(a.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let mut cfg = tiny(BlockKind::Swin);
    cfg.modules.cmd_on = false;
    let mut net: Network<f64> = Network::new(&cfg, 6).unwrap();
    let x = random_input(&[1, 4, 16, 16, 16], 1);
    let mask = random_mask(4096, 2);
    let lc = LossConfig { alpha: 1.0, beta: 0.0, ..Default::default() };
    jitter_params(&mut net, 0.01, 1);
    let obj = Objective { x: &x, masks: Some(&mask), labels: &[0], loss: &lc };
    let opts = GradCheckOptions { samples_per_tensor: Some(4), ..Default::default() };
    let report = check_gradients(&mut net, &obj, &opts).unwrap();
    let worst = report.worst().unwrap();
    assert!(worst.max_rel_err < 1e-3, "{worst:?}");
}

#[test]
fn cmd_gradient_matches_finite_differences() {
    let mut cfg = tiny(BlockKind::Swin);
    cfg.modules.tafe_on = false;
    let mut net: Network<f64> = Network::new(&cfg, 7).unwrap();
    let x = random_input(&[2, 4, 16, 16, 16], 1);
    let mask = random_mask(2 * 4096, 2);
    let lc = LossConfig::default();
    jitter_params(&mut net, 0.01, 1);
    let obj = Objective { x: &x, masks: Some(&mask), labels: &[0, 1], loss: &lc };
    let opts = GradCheckOptions { samples_per_tensor: Some(4), ..Default::default() };
    let report = check_gradients(&mut net, &obj, &opts).unwrap();
    let worst = report.worst().unwrap();
    assert!(worst.max_rel_err < 1e-3, "{worst:?}");
}

#[test]
fn aggregate_uses_deepest_stages() {
    let net: Network<f64> = Network::new(&tiny(BlockKind::Swin), 0).unwrap();
    let mut g = Graph::new();
    let p = net.params.bind_frozen(&mut g);
    let x = g.constant(random_input(&[1, 4, 16, 16, 16], 1));
    let pyr = net.backbone.encode(&mut g, &p, x);
    let one = aggregate(&mut g, &pyr, &TafeConfig { depth: 1, ..Default::default() });
    let deepest = gap(&mut g, pyr.0[3]);
    assert_eq!(g.value(one), g.value(deepest));
    let two = aggregate(&mut g, &pyr, &TafeConfig { depth: 2, ..Default::default() });
    assert_eq!(g.shape(two), &[1, 16 + 32]);
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = ModelConfig::default();
    cfg.backbone.input_size = [24; 3];
    assert!(matches!(Network::<f32>::new(&cfg, 0), Err(Error::Shape(_))));
    let mut cfg = ModelConfig::default();
    cfg.modules.tafe_on = false;
    cfg.modules.cmd_on = false;
    assert!(matches!(Network::<f32>::new(&cfg, 0), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shape_law_for_random_configs(c in 1usize..4, mult in 1usize..3, depth0 in 1usize..3) {
        let embed = 2 * c;
        let input = 16 * mult;
        let mut cfg = ModelConfig::default();
        cfg.backbone.embed_dim = embed;
        cfg.backbone.input_size = [input; 3];
        cfg.backbone.depths = [depth0, 1, 1, 1];
        cfg.backbone.num_heads = [1, 2, 2, 2];
        cfg.modules.cmd_on = false;
        cfg.modules.seg_supervision_on = false;
        let net: Network<f32> = Network::new(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 4, input, input, input]));
        let pyr = net.backbone.encode(&mut g, &p, x);
        for (i, v) in pyr.0.iter().enumerate() {
            let s = input >> (i + 1);
            prop_assert_eq!(g.shape(*v), &[1, embed << i, s, s, s][..]);
        }
    }

    #[test]
    fn dice_is_bounded_and_permutation_invariant(seed in 0u64..500) {
        let mut rng = SeededRng::new(seed);
        let n = 12;
        let logits: Vec<f64> = (0..4 * n).map(|_| 2.0 * rng.normal()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(4) as u8).collect();
        let probs = idhnet_tensor::softmax_axis(&logits, &[1, 4, n], 1);
        let a = dice_from_probs(&probs, 1, 4, &labels, 1e-5);
        prop_assert!((0.0..=1.0).contains(&a));
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pp: Vec<f64> = (0..4).flat_map(|k| perm.iter().map(|&i| probs[k * n + i]).collect::<Vec<_>>()).collect();
        let lp: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert!((dice_from_probs(&pp, 1, 4, &lp, 1e-5) - a).abs() < 1e-12);
    }

    #[test]
    fn ce_is_nonnegative(z0 in -30.0f64..30.0, z1 in -30.0f64..30.0, y in 0u8..2) {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::new(&[1, 2], vec![z0, z1]));
        let l = ce_loss(&mut g, z, &[y], None).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }
}

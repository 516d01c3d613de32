//! Dual-stream fusion and the joint objective
//! `L_total = α·L_seg + β·L_cla` (soft Dice + weighted cross-entropy).

use idhnet_tensor::{softmax_axis, Bound, CustomOp, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::SEG_CHANNELS;
use crate::error::{Error, Result};
use crate::layers::{Builder, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dice_smooth: f64,
    /// Per-class cross-entropy weights; `None` weighs all classes 1.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0, dice_smooth: 1e-5, class_weights: None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!("loss weights alpha {} beta {} must be >= 0 with a positive sum", self.alpha, self.beta)));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config(format!("dice_smooth {} must be positive", self.dice_smooth)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Config(format!("class weights {w:?} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Fusion layer: one linear map from `[C_TAFE, C_CMD]` (width `2·n_cls`) to
/// `n_cls` logits.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub layer: Linear,
}

impl Fusion {
    pub(crate) fn new<T: Float>(n_cls: usize, bld: &mut Builder<T>) -> Self {
        Self { layer: Linear::new(bld, "fusion.linear", 2 * n_cls, n_cls) }
    }

    pub fn fuse<T: Float>(&self, g: &mut Graph<T>, p: &Bound, c_tafe: Var, c_cmd: Var) -> Result<Var> {
        if g.shape(c_tafe) != g.shape(c_cmd) || g.shape(c_tafe).len() != 2 {
            return Err(Error::Shape(format!("fuse {:?} with {:?}", g.shape(c_tafe), g.shape(c_cmd))));
        }
        let cat = g.concat(&[c_tafe, c_cmd], 1);
        Ok(self.layer.forward(g, p, cat))
    }
}

fn check_mask(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("mask has {} voxels, logits imply {n}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= SEG_CHANNELS) {
        return Err(Error::InvalidMask(format!("label {l} outside 0..{SEG_CHANNELS}")));
    }
    Ok(())
}

/// Soft Dice loss from probabilities `probs` `(B, K, S)` (flattened spatial
/// axis) against integer labels `(B, S)`: `1 − mean_{b,k} (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_from_probs(probs: &[f64], batch: usize, classes: usize, labels: &[u8], eps: f64) -> f64 {
    let s = probs.len() / (batch * classes);
    let mut total = 0.0;
    for b in 0..batch {
        for k in 0..classes {
            let p = &probs[(b * classes + k) * s..][..s];
            let g = &labels[b * s..][..s];
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for (pv, &gv) in p.iter().zip(g) {
                let gv = (gv as usize == k) as u8 as f64;
                inter += pv * gv;
                sp += pv;
                sg += gv;
            }
            total += (2.0 * inter + eps) / (sp + sg + eps);
        }
    }
    1.0 - total / (batch * classes) as f64
}

struct DiceOp<T> {
    labels: Vec<u8>,
    probs: Vec<T>,
    eps: T,
}

impl<T: Float> CustomOp<T> for DiceOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let (b, k) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let scale = grad.item() * T::from_f64(-1.0 / (b * k) as f64);
        let two = T::from_f64(2.0);
        let mut dp = vec![T::zero(); self.probs.len()];
        for bi in 0..b {
            let g = &self.labels[bi * s..][..s];
            for ki in 0..k {
                let p = &self.probs[(bi * k + ki) * s..][..s];
                let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
                for (&pv, &gv) in p.iter().zip(g) {
                    if gv as usize == ki {
                        inter += pv;
                        sg += T::one();
                    }
                    sp += pv;
                }
                let den = sp + sg + self.eps;
                let num = two * inter + self.eps;
                let out = &mut dp[(bi * k + ki) * s..][..s];
                for (o, &gv) in out.iter_mut().zip(g) {
                    let gk = if gv as usize == ki { T::one() } else { T::zero() };
                    *o = scale * (two * gk * den - num) / (den * den);
                }
            }
        }
        // softmax over the channel axis: dS_k = p_k (dp_k − Σ_j p_j dp_j)
        let mut ds = vec![T::zero(); dp.len()];
        for bi in 0..b {
            for v in 0..s {
                let mut dot = T::zero();
                for ki in 0..k {
                    let i = (bi * k + ki) * s + v;
                    dot += self.probs[i] * dp[i];
                }
                for ki in 0..k {
                    let i = (bi * k + ki) * s + v;
                    ds[i] = self.probs[i] * (dp[i] - dot);
                }
            }
        }
        vec![Some(Tensor::new(shape, ds))]
    }
}

/// Soft Dice loss of segmentation logits `(B, K, D, H, W)` (softmax over
/// channels, background included) against `labels` `(B·D·H·W)`.
pub fn dice_loss<T: Float>(g: &mut Graph<T>, seg_logits: Var, labels: &[u8], eps: f64) -> Result<Var> {
    let shape = g.shape(seg_logits).to_vec();
    if shape.len() < 3 || shape[1] != SEG_CHANNELS {
        return Err(Error::Shape(format!("segmentation logits {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    check_mask(labels, b * s)?;
    let probs = softmax_axis(g.value(seg_logits).data(), &shape, 1);
    let p64: Vec<f64> = probs.iter().map(|v| v.as_f64()).collect();
    let loss = dice_from_probs(&p64, b, k, labels, eps);
    let op = DiceOp { labels: labels.to_vec(), probs, eps: T::from_f64(eps) };
    Ok(g.custom(&[seg_logits], Tensor::scalar(T::from_f64(loss)), Box::new(op)))
}

struct CeOp<T> {
    /// d loss / d logits for unit upstream gradient.
    dlogits: Vec<T>,
}

impl<T: Float> CustomOp<T> for CeOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        vec![Some(Tensor::new(inputs[0].shape(), self.dlogits.iter().map(|&d| d * g).collect()))]
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Weighted cross-entropy `Σᵢ w_{yᵢ}·(−log softmax(Cᵢ)[yᵢ]) / N`. With a
/// single logit column the binary (sigmoid) form is used.
pub fn ce_loss<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[u8], class_weights: Option<&[f64]>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!("logits {shape:?} for {} labels", labels.len())));
    }
    let (n, k) = (shape[0], shape[1]);
    let classes = k.max(2);
    if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidLabel(format!("class {l} with {classes} classes")));
    }
    if let Some(w) = class_weights {
        if w.len() != classes {
            return Err(Error::Config(format!("{} class weights for {classes} classes", w.len())));
        }
    }
    let weight = |y: u8| class_weights.map_or(1.0, |w| w[y as usize]);
    let x: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
    let mut loss = 0.0;
    let mut dl = vec![0.0; n * k];
    for i in 0..n {
        let y = labels[i] as usize;
        let w = weight(labels[i]) / n as f64;
        if k == 1 {
            // binary logit z: p = σ(z), −log p(y)
            let z = x[i];
            let row = [0.0, z];
            loss += w * (log_sum_exp(&row) - row[y]);
            let p = 1.0 / (1.0 + (-z).exp());
            dl[i] = w * (p - y as f64);
        } else {
            let row = &x[i * k..][..k];
            let lse = log_sum_exp(row);
            loss += w * (lse - row[y]);
            for j in 0..k {
                let p = (row[j] - lse).exp();
                dl[i * k + j] = w * (p - (j == y) as u8 as f64);
            }
        }
    }
    let op = CeOp { dlogits: dl.into_iter().map(T::from_f64).collect() };
    Ok(g.custom(&[logits], Tensor::scalar(T::from_f64(loss)), Box::new(op)))
}

/// The three loss components as graph scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub seg: Option<Var>,
    pub cla: Var,
}

/// `α·L_seg + β·L_cla`; the segmentation term is skipped when `seg` is
/// `None` (no decoder) or `α = 0`.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    seg: Option<(Var, &[u8])>,
    logits: Var,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let cla = ce_loss(g, logits, labels, cfg.class_weights.as_deref())?;
    let cla_w = g.scale(cla, T::from_f64(cfg.beta));
    match seg {
        Some((s, mask)) if cfg.alpha > 0.0 => {
            let l_seg = dice_loss(g, s, mask, cfg.dice_smooth)?;
            let seg_w = g.scale(l_seg, T::from_f64(cfg.alpha));
            Ok(LossTerms { total: g.add(seg_w, cla_w), seg: Some(l_seg), cla })
        }
        _ => Ok(LossTerms { total: cla_w, seg: None, cla }),
    }
}

/// Positive-class probability per row: `softmax[1]`, or `σ(z)` for a single
/// logit column.
pub fn positive_probability(logits: &[f64], n_cls: usize) -> Vec<f64> {
    if n_cls == 1 {
        logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
    } else {
        logits
            .chunks(n_cls)
            .map(|row| (row[1] - log_sum_exp(row)).exp())
            .collect()
    }
}

/// Class probabilities per row (two columns for a sigmoid head).
pub fn class_probabilities(logits: &[f64], n_cls: usize) -> Vec<Vec<f64>> {
    if n_cls == 1 {
        positive_probability(logits, 1).into_iter().map(|p| vec![1.0 - p, p]).collect()
    } else {
        logits
            .chunks(n_cls)
            .map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(|x| (x - lse).exp()).collect()
            })
            .collect()
    }
}

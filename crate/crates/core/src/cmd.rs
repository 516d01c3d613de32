//! Cross-modality differential module: tumor-gated T2 and FLAIR volumes pass
//! through one shared conv stack; the amplified feature difference drives
//! channel and spatial attention, which residually re-weights both streams
//! before pooled classification.

use idhnet_tensor::{Bound, Float, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, Linear, MlpHead};
use crate::volume::Sequence;

/// Hidden channels of the spatial-attention conv.
const SPATIAL_HIDDEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmdConfig {
    pub gamma: f64,
    pub floor: f64,
    pub conv_channels: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub n_cls: usize,
    pub head_hidden: usize,
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self { gamma: 2.0, floor: 0.1, conv_channels: 16, reduction: 4, spatial_kernel: 7, n_cls: 2, head_hidden: 32 }
    }
}

impl CmdConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.gamma > 1.0) {
            return err(format!("cmd.gamma must be > 1, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.floor) {
            return err(format!("cmd.floor {} outside [0, 1)", self.floor));
        }
        if self.conv_channels == 0 || self.reduction == 0 || !self.conv_channels.is_multiple_of(self.reduction) {
            return err(format!("cmd.reduction {} must divide conv_channels {}", self.reduction, self.conv_channels));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return err(format!("cmd.spatial_kernel {} must be odd", self.spatial_kernel));
        }
        if self.n_cls == 0 || self.head_hidden == 0 {
            return err("cmd.n_cls and cmd.head_hidden must be >= 1".into());
        }
        Ok(())
    }
}

/// `v ⊙ max(prob, floor)`.
pub fn soft_gate<T: Float>(g: &mut Graph<T>, v: Var, tumor_prob: Var, floor: f64) -> Result<Var> {
    if g.shape(v) != g.shape(tumor_prob) {
        return Err(Error::Shape(format!("gate {:?} vs prob {:?}", g.shape(v), g.shape(tumor_prob))));
    }
    let w = g.max_floor(tumor_prob, T::from_f64(floor));
    Ok(g.mul(v, w))
}

/// `γ · (F_T2 − F_FLAIR)`.
pub fn differential<T: Float>(g: &mut Graph<T>, f_t2: Var, f_flair: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 1.0) {
        return Err(Error::Config(format!("gamma must be > 1, got {gamma}")));
    }
    if g.shape(f_t2) != g.shape(f_flair) {
        return Err(Error::Shape(format!("{:?} vs {:?}", g.shape(f_t2), g.shape(f_flair))));
    }
    let d = g.sub(f_t2, f_flair);
    Ok(g.scale(d, T::from_f64(gamma)))
}

/// `A = CA ⊙ SA` (broadcast) and `F' = F ⊙ (1 + A)` for both streams.
/// `ca`: `(B, c)`, `sa`: `(B, 1, S..)`. Returns `(A, F'_T2, F'_FLAIR)`.
pub fn apply_mismatch<T: Float>(g: &mut Graph<T>, f_t2: Var, f_flair: Var, ca: Var, sa: Var) -> (Var, Var, Var) {
    let [b, c] = [g.shape(ca)[0], g.shape(ca)[1]];
    let ca = g.reshape(ca, &[b, c, 1, 1, 1]);
    let a = g.mul_broadcast(ca, sa);
    let reweight = |g: &mut Graph<T>, f: Var| {
        let fa = g.mul(f, a);
        g.add(f, fa)
    };
    let t2 = reweight(g, f_t2);
    let fl = reweight(g, f_flair);
    (a, t2, fl)
}

/// Intermediate tensors of one CMD pass.
#[derive(Clone, Copy, Debug)]
pub struct MismatchFeatures {
    pub f_t2: Var,
    pub f_flair: Var,
    pub f_diff: Var,
    pub ca: Var,
    pub sa: Var,
    pub attention: Var,
    pub enhanced_t2: Var,
    pub enhanced_flair: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Cmd {
    pub cfg: CmdConfig,
    conv1: Conv,
    conv2: Conv,
    ca_fc1: Linear,
    ca_fc2: Linear,
    sa_conv: Conv,
    sa_out: Conv,
    head: MlpHead,
}

impl Cmd {
    pub(crate) fn new<T: Float>(cfg: &CmdConfig, bld: &mut Builder<T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.conv_channels;
        let k = cfg.spatial_kernel;
        Ok(Self {
            cfg: cfg.clone(),
            conv1: Conv::new(bld, "cmd.shared.conv1", 1, c, 3, 2, 1),
            conv2: Conv::new(bld, "cmd.shared.conv2", c, c, 3, 2, 1),
            ca_fc1: Linear::new(bld, "cmd.channel_att.fc1", c, c / cfg.reduction),
            ca_fc2: Linear::new(bld, "cmd.channel_att.fc2", c / cfg.reduction, c),
            sa_conv: Conv::new(bld, "cmd.spatial_att.conv", 2, SPATIAL_HIDDEN, k, 1, k / 2),
            sa_out: Conv::new(bld, "cmd.spatial_att.out", SPATIAL_HIDDEN, 1, 1, 1, 0),
            head: MlpHead::new(bld, "cmd.head", 2 * c, cfg.head_hidden, cfg.n_cls, 0.0),
        })
    }

    /// Shared stack applied to T2 and FLAIR stacked along the batch axis.
    fn shared_features<T: Float>(&self, g: &mut Graph<T>, p: &Bound, t2: Var, flair: Var) -> (Var, Var) {
        let b = g.shape(t2)[0];
        let both = g.concat(&[t2, flair], 0);
        let h = self.conv1.forward(g, p, both);
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h);
        let h = g.relu(h);
        (g.select(h, 0, 0, b), g.select(h, 0, b, b))
    }

    /// `σ(MLP(GAP) + MLP(GMP))` with one MLP shared by both pooled vectors.
    pub fn channel_attention<T: Float>(&self, g: &mut Graph<T>, p: &Bound, f_diff: Var) -> Var {
        let b = g.shape(f_diff)[0];
        let avg = g.mean_spatial(f_diff);
        let max = g.max_spatial(f_diff);
        let both = g.concat(&[avg, max], 0);
        let h = self.ca_fc1.forward(g, p, both);
        let h = g.relu(h);
        let h = self.ca_fc2.forward(g, p, h);
        let (ha, hm) = (g.select(h, 0, 0, b), g.select(h, 0, b, b));
        let s = g.add(ha, hm);
        g.sigmoid(s)
    }

    /// Channel mean and max → conv → ReLU → 1×1 conv → sigmoid.
    pub fn spatial_attention<T: Float>(&self, g: &mut Graph<T>, p: &Bound, f_diff: Var) -> Var {
        let mean = g.channel_mean(f_diff);
        let max = g.channel_max(f_diff);
        let cat = g.concat(&[mean, max], 1);
        let h = self.sa_conv.forward(g, p, cat);
        let h = g.relu(h);
        let h = self.sa_out.forward(g, p, h);
        g.sigmoid(h)
    }

    /// `C_CMD = MLP([GAP(F'_T2), GAP(F'_FLAIR)])`.
    pub fn classify<T: Float>(&self, g: &mut Graph<T>, p: &Bound, enhanced_t2: Var, enhanced_flair: Var) -> Result<Var> {
        let c = self.cfg.conv_channels;
        for v in [enhanced_t2, enhanced_flair] {
            if g.shape(v).len() < 3 || g.shape(v)[1] != c {
                return Err(Error::Shape(format!("cmd features {:?}, expected {c} channels", g.shape(v))));
            }
        }
        let a = g.mean_spatial(enhanced_t2);
        let b = g.mean_spatial(enhanced_flair);
        let cat = g.concat(&[a, b], 1);
        Ok(self.head.forward(g, p, cat, None))
    }

    /// `input`: `(B, 4, D, H, W)`; `tumor_prob`: `(B, 1, D, H, W)`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, input: Var, tumor_prob: Var) -> MismatchFeatures {
        let t2 = g.select(input, 1, Sequence::T2.index(), 1);
        let flair = g.select(input, 1, Sequence::Flair.index(), 1);
        let t2 = soft_gate(g, t2, tumor_prob, self.cfg.floor).expect("gate shapes");
        let flair = soft_gate(g, flair, tumor_prob, self.cfg.floor).expect("gate shapes");
        let (f_t2, f_flair) = self.shared_features(g, p, t2, flair);
        let f_diff = differential(g, f_t2, f_flair, self.cfg.gamma).expect("validated gamma");
        let ca = self.channel_attention(g, p, f_diff);
        let sa = self.spatial_attention(g, p, f_diff);
        let (attention, enhanced_t2, enhanced_flair) = apply_mismatch(g, f_t2, f_flair, ca, sa);
        let logits = self.classify(g, p, enhanced_t2, enhanced_flair).expect("cmd widths");
        MismatchFeatures { f_t2, f_flair, f_diff, ca, sa, attention, enhanced_t2, enhanced_flair, logits }
    }
}

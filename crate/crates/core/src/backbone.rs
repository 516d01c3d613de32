//! Hierarchical encoder–decoder: shifted-window attention stages (or
//! residual conv stages) produce a four-level feature pyramid, and a U-Net
//! style decoder turns it into 4-channel segmentation logits.
//!
//! Shape law for input `D³` and embedding width `C`: stage `i` (1-based)
//! has `C·2^(i−1)` channels at spatial extent `D/2^i`.

use idhnet_tensor::{Bound, Float, Graph, ParamId, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, LayerNorm, Linear, UpConv, LINEAR_INIT_STD};
use crate::volume::Dims;

pub const NUM_STAGES: usize = 4;
pub const SEG_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    #[default]
    Swin,
    ConvResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub input_size: Dims,
    pub block_kind: BlockKind,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 2, 4],
            window_size: 4,
            input_size: [32, 32, 32],
            block_kind: BlockKind::Swin,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_dims(&self, stage: usize) -> Dims {
        self.input_size.map(|d| d >> (stage + 1))
    }

    /// Attention window of `stage` (clipped to the grid) and the shift used
    /// on odd blocks.
    pub fn stage_window(&self, stage: usize) -> ([usize; 3], [usize; 3]) {
        let grid = self.stage_dims(stage);
        let window = grid.map(|g| self.window_size.min(g));
        let shift = std::array::from_fn(|a| if grid[a] > window[a] { window[a] / 2 } else { 0 });
        (window, shift)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |m: String| Err(Error::Shape(m));
        if self.in_channels == 0 || self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return shape(format!("backbone sizes must be positive: {self:?}"));
        }
        let factor = 1 << NUM_STAGES;
        if self.input_size.iter().any(|&d| d == 0 || d % factor != 0) {
            return shape(format!("input size {:?} must be a positive multiple of {factor}", self.input_size));
        }
        for s in 0..NUM_STAGES {
            let (c, h) = (self.stage_channels(s), self.num_heads[s]);
            if h == 0 || c % h != 0 {
                return shape(format!("stage {} width {c} not divisible by {h} heads", s + 1));
            }
            if self.depths[s] == 0 {
                return shape(format!("stage {} has depth 0", s + 1));
            }
            if self.block_kind == BlockKind::Swin {
                let (w, _) = self.stage_window(s);
                let grid = self.stage_dims(s);
                if (0..3).any(|a| !grid[a].is_multiple_of(w[a])) {
                    return shape(format!("window {:?} does not tile stage {} grid {grid:?}", w, s + 1));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Block {
    Swin {
        norm1: LayerNorm,
        qkv: Linear,
        table: ParamId,
        proj: Linear,
        norm2: LayerNorm,
        fc1: Linear,
        fc2: Linear,
        heads: usize,
        window: [usize; 3],
        shift: [usize; 3],
    },
    ConvResidual {
        conv1: Conv,
        conv2: Conv,
    },
}

impl Block {
    /// `x` is channels-last `(B, D, H, W, C)`.
    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        match self {
            Block::Swin { norm1, qkv, table, proj, norm2, fc1, fc2, heads, window, shift } => {
                let h = norm1.forward(g, p, x);
                let h = qkv.forward(g, p, h);
                let h = g.window_attention(h, p[*table], *heads, *window, *shift);
                let h = proj.forward(g, p, h);
                let x = g.add(x, h);
                let h = norm2.forward(g, p, x);
                let h = fc1.forward(g, p, h);
                let h = g.gelu(h);
                let h = fc2.forward(g, p, h);
                g.add(x, h)
            }
            Block::ConvResidual { conv1, conv2 } => {
                let h = g.to_channels_first(x);
                let h = conv1.forward(g, p, h);
                let h = g.relu(h);
                let h = conv2.forward(g, p, h);
                let h = g.to_channels_last(h);
                g.add(x, h)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Merge {
    norm: LayerNorm,
    reduce: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: UpConv,
    fuse: Conv,
}

/// Parameter layout of the encoder and (optionally) the decoder.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_embed: Conv,
    merges: Vec<Merge>,
    stages: Vec<Vec<Block>>,
    decoder: Option<Decoder>,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Levels from deepest (x₄ → x₃ resolution) to x₁ resolution.
    levels: Vec<DecoderLevel>,
    up_full: UpConv,
    stem: Conv,
    head_mix: Conv,
    head_out: Conv,
}

/// Encoder stage outputs `x₁…x₄`, channels-first `(B, Cᵢ, Sᵢ, Sᵢ, Sᵢ)`.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid(pub [Var; NUM_STAGES]);

impl Backbone {
    pub(crate) fn new<T: Float>(cfg: &BackboneConfig, with_decoder: bool, bld: &mut Builder<T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let patch_embed = Conv::new(bld, "backbone.patch_embed", cfg.in_channels, c, 2, 2, 0);
        let mut merges = Vec::new();
        let mut stages = Vec::new();
        for s in 0..NUM_STAGES {
            let width = cfg.stage_channels(s);
            if s > 0 {
                let name = format!("backbone.merge{s}");
                merges.push(Merge {
                    norm: LayerNorm::new(bld, &format!("{name}.norm"), 4 * width),
                    reduce: Linear::new(bld, &format!("{name}.reduce"), 4 * width, width),
                });
            }
            let (window, shift) = cfg.stage_window(s);
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[s] {
                let name = format!("backbone.stage{}.block{b}", s + 1);
                blocks.push(match cfg.block_kind {
                    BlockKind::Swin => {
                        let heads = cfg.num_heads[s];
                        let table_len: usize = window.iter().map(|w| 2 * w - 1).product();
                        let hidden = cfg.mlp_ratio * width;
                        Block::Swin {
                            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), width),
                            qkv: Linear::new(bld, &format!("{name}.qkv"), width, 3 * width),
                            table: bld.normal(&format!("{name}.rel_bias"), &[table_len, heads], LINEAR_INIT_STD),
                            proj: Linear::new(bld, &format!("{name}.proj"), width, width),
                            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), width),
                            fc1: Linear::new(bld, &format!("{name}.fc1"), width, hidden),
                            fc2: Linear::new(bld, &format!("{name}.fc2"), hidden, width),
                            heads,
                            window,
                            shift: if b % 2 == 1 { shift } else { [0; 3] },
                        }
                    }
                    BlockKind::ConvResidual => Block::ConvResidual {
                        conv1: Conv::new(bld, &format!("{name}.conv1"), width, width, 3, 1, 1),
                        conv2: Conv::new(bld, &format!("{name}.conv2"), width, width, 3, 1, 1),
                    },
                });
            }
            stages.push(blocks);
        }
        let decoder = with_decoder.then(|| {
            let mut levels = Vec::new();
            for s in (1..NUM_STAGES).rev() {
                let (hi, lo) = (cfg.stage_channels(s), cfg.stage_channels(s - 1));
                // full 3×3×3 fusion only on the two coarsest levels
                let (k, pad) = if s >= 2 { (3, 1) } else { (1, 0) };
                levels.push(DecoderLevel {
                    up: UpConv::new(bld, &format!("backbone.decoder.level{s}.up"), hi, lo),
                    fuse: Conv::new(bld, &format!("backbone.decoder.level{s}.fuse"), 2 * lo, lo, k, 1, pad),
                });
            }
            Decoder {
                levels,
                up_full: UpConv::new(bld, "backbone.decoder.up_full", c, c),
                stem: Conv::new(bld, "backbone.decoder.stem", cfg.in_channels, c, 1, 1, 0),
                head_mix: Conv::new(bld, "backbone.decoder.head_mix", 2 * c, c, 1, 1, 0),
                head_out: Conv::new(bld, "backbone.decoder.head_out", c, SEG_CHANNELS, 1, 1, 0),
            }
        });
        Ok(Self { cfg: cfg.clone(), patch_embed, merges, stages, decoder })
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.cfg.in_channels, self.cfg.input_size[0], self.cfg.input_size[1], self.cfg.input_size[2]];
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::Shape(format!("input {shape:?}, expected (B, {want:?})")));
        }
        Ok(())
    }

    /// `x`: `(B, in_channels, D, H, W)`.
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Pyramid {
        let h = self.patch_embed.forward(g, p, x);
        let mut h = g.to_channels_last(h);
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                // space-to-depth gives 8·C_{s-1} = 4·C_s channels
                let m = &self.merges[s - 1];
                h = g.patch_merge(h);
                h = m.norm.forward(g, p, h);
                h = m.reduce.forward(g, p, h);
            }
            for b in blocks {
                h = b.forward(g, p, h);
            }
            outs.push(g.to_channels_first(h));
        }
        Pyramid([outs[0], outs[1], outs[2], outs[3]])
    }

    /// Segmentation logits `(B, 4, D, H, W)`. Panics without a decoder.
    pub fn decode<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var, pyr: &Pyramid) -> Var {
        let dec = self.decoder.as_ref().expect("backbone built without decoder");
        let mut h = pyr.0[NUM_STAGES - 1];
        for (lvl, skip) in dec.levels.iter().zip(pyr.0[..NUM_STAGES - 1].iter().rev()) {
            let up = lvl.up.forward(g, p, h);
            let cat = g.concat(&[up, *skip], 1);
            let f = lvl.fuse.forward(g, p, cat);
            h = g.relu(f);
        }
        let up = dec.up_full.forward(g, p, h);
        let stem = dec.stem.forward(g, p, x);
        let stem = g.relu(stem);
        let cat = g.concat(&[up, stem], 1);
        let mix = dec.head_mix.forward(g, p, cat);
        let mix = g.relu(mix);
        dec.head_out.forward(g, p, mix)
    }
}

/// `1 − softmax(S)[background]`, shape `(B, 1, D, H, W)`.
pub fn tumor_probability<T: Float>(g: &mut Graph<T>, seg_logits: Var) -> Var {
    let probs = g.softmax(seg_logits, 1);
    let bg = g.select(probs, 1, 0, 1);
    g.affine(bg, -T::one(), T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_law_and_windows() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        assert_eq!((0..4).map(|s| cfg.stage_channels(s)).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
        assert_eq!(cfg.stage_dims(0), [16; 3]);
        assert_eq!(cfg.stage_dims(3), [2; 3]);
        assert_eq!(cfg.stage_window(0), ([4; 3], [2; 3]));
        assert_eq!(cfg.stage_window(2), ([4; 3], [0; 3]));
        assert_eq!(cfg.stage_window(3), ([2; 3], [0; 3]));
    }

    #[test]
    fn invalid_configs() {
        let bad_size = BackboneConfig { input_size: [24, 32, 32], ..Default::default() };
        assert!(matches!(bad_size.validate(), Err(Error::Shape(_))));
        let bad_heads = BackboneConfig { num_heads: [3, 2, 2, 4], ..Default::default() };
        assert!(bad_heads.validate().is_err());
        let bad_window = BackboneConfig { window_size: 3, ..Default::default() };
        assert!(bad_window.validate().is_err());
    }
}

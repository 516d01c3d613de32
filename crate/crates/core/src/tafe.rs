//! Tumor-aware feature encoding: global-average-pooled encoder stages,
//! concatenated (deepest last) and classified by a small MLP.

use idhnet_tensor::{Bound, Float, Graph, SeededRng, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Pyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::layers::{Builder, MlpHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TafeConfig {
    /// Number of deepest stages pooled (1 = x₄ only, 4 = x₁…x₄).
    pub depth: usize,
    pub head_hidden: usize,
    /// 2 for softmax logits, 1 for a single sigmoid logit.
    pub n_cls: usize,
    pub dropout_rate: f64,
}

impl Default for TafeConfig {
    fn default() -> Self {
        Self { depth: 4, head_hidden: 64, n_cls: 2, dropout_rate: 0.5 }
    }
}

impl TafeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=NUM_STAGES).contains(&self.depth) {
            return Err(Error::Config(format!("tafe.depth {} outside 1..=4", self.depth)));
        }
        if self.n_cls == 0 {
            return Err(Error::Config("tafe.n_cls must be >= 1".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("tafe.head_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("tafe.dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Zero-based indices of the pooled stages, deepest last.
    pub fn stages(&self) -> std::ops::Range<usize> {
        NUM_STAGES - self.depth..NUM_STAGES
    }

    /// Width of the aggregated feature vector.
    pub fn feature_width(&self, backbone: &BackboneConfig) -> usize {
        self.stages().map(|s| backbone.stage_channels(s)).sum()
    }
}

/// Global average pooling `(B, C, S..)` → `(B, C)`.
pub fn gap<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    g.mean_spatial(x)
}

/// Concatenated GAP vectors of the selected stages, deepest last.
pub fn aggregate<T: Float>(g: &mut Graph<T>, pyr: &Pyramid, cfg: &TafeConfig) -> Var {
    let pooled: Vec<Var> = cfg.stages().map(|s| gap(g, pyr.0[s])).collect();
    if pooled.len() == 1 {
        pooled[0]
    } else {
        g.concat(&pooled, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Tafe {
    pub cfg: TafeConfig,
    pub width: usize,
    pub head: MlpHead,
}

impl Tafe {
    pub(crate) fn new<T: Float>(cfg: &TafeConfig, backbone: &BackboneConfig, bld: &mut Builder<T>) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.feature_width(backbone);
        Ok(Self {
            cfg: cfg.clone(),
            width,
            head: MlpHead::new(bld, "tafe.head", width, cfg.head_hidden, cfg.n_cls, cfg.dropout_rate),
        })
    }

    /// Logits `C_TAFE`; dropout is active only when `rng` is given.
    pub fn classify<T: Float>(&self, g: &mut Graph<T>, p: &Bound, features: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        let shape = g.shape(features);
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Shape(format!("tafe features {shape:?}, expected (B, {})", self.width)));
        }
        Ok(self.head.forward(g, p, features, rng))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, pyr: &Pyramid, rng: Option<&mut SeededRng>) -> Var {
        let f = aggregate(g, pyr, &self.cfg);
        self.classify(g, p, f, rng).expect("aggregate width matches head")
    }
}

//! The full network: backbone + TAFE + CMD + fusion, with module switches
//! for ablations.

use idhnet_tensor::{Bound, Float, Graph, ParamStore, SeededRng, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{tumor_probability, Backbone, BackboneConfig, Pyramid};
use crate::cmd::{Cmd, CmdConfig, MismatchFeatures};
use crate::error::{Error, Result};
use crate::layers::Builder;
use crate::loss::{class_probabilities, total_loss, Fusion, LossConfig, LossTerms};
use crate::tafe::{Tafe, TafeConfig};
use crate::volume::{voxel_count, Case, Sequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleSwitches {
    pub tafe_on: bool,
    pub cmd_on: bool,
    /// Overrides `tafe.depth` when set.
    pub tafe_depth: Option<usize>,
    /// Segmentation (Dice) supervision; off forces `α = 0`.
    pub seg_supervision_on: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self { tafe_on: true, cmd_on: true, tafe_depth: None, seg_supervision_on: true }
    }
}

/// Architecture description; its digest identifies compatible checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tafe: TafeConfig,
    pub cmd: CmdConfig,
    pub modules: ModuleSwitches,
}

impl ModelConfig {
    /// Folds `modules.tafe_depth` into `tafe.depth`.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if let Some(d) = out.modules.tafe_depth.take() {
            out.tafe.depth = d;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.resolved();
        cfg.backbone.validate()?;
        let m = &cfg.modules;
        if !m.tafe_on && !m.cmd_on {
            return Err(Error::Config("at least one of tafe_on / cmd_on must be set".into()));
        }
        if m.tafe_on {
            cfg.tafe.validate()?;
        }
        if m.cmd_on {
            cfg.cmd.validate()?;
            if cfg.backbone.in_channels < 4 {
                return Err(Error::Config("cmd needs the T2 and FLAIR input channels".into()));
            }
        }
        if m.tafe_on && m.cmd_on && cfg.tafe.n_cls != cfg.cmd.n_cls {
            return Err(Error::Config(format!("tafe.n_cls {} differs from cmd.n_cls {}", cfg.tafe.n_cls, cfg.cmd.n_cls)));
        }
        Ok(())
    }

    pub fn n_cls(&self) -> usize {
        if self.modules.tafe_on {
            self.tafe.n_cls
        } else {
            self.cmd.n_cls
        }
    }

    pub fn needs_decoder(&self) -> bool {
        self.modules.seg_supervision_on || self.modules.cmd_on
    }

    /// SHA-256 of the canonical JSON of the resolved config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&self.resolved()).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub pyramid: Pyramid,
    pub seg_logits: Option<Var>,
    pub tumor_prob: Option<Var>,
    pub c_tafe: Option<Var>,
    pub cmd: Option<MismatchFeatures>,
    /// `C_final`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Network<T: Float> {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub tafe: Option<Tafe>,
    pub cmd: Option<Cmd>,
    pub fusion: Option<Fusion>,
    pub params: ParamStore<T>,
}

impl<T: Float> Network<T> {
    /// Randomly initialised network (truncated-normal weights, zero biases).
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let mut params = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut bld = Builder { store: &mut params, rng: &mut rng };
        let backbone = Backbone::new(&cfg.backbone, cfg.needs_decoder(), &mut bld)?;
        let tafe = if cfg.modules.tafe_on { Some(Tafe::new(&cfg.tafe, &cfg.backbone, &mut bld)?) } else { None };
        let cmd = if cfg.modules.cmd_on { Some(Cmd::new(&cfg.cmd, &mut bld)?) } else { None };
        let fusion = (tafe.is_some() && cmd.is_some()).then(|| Fusion::new(cfg.n_cls(), &mut bld));
        Ok(Self { cfg, backbone, tafe, cmd, fusion, params })
    }

    /// Same layout with parameters converted to another scalar type.
    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            backbone: self.backbone.clone(),
            tafe: self.tafe.clone(),
            cmd: self.cmd.clone(),
            fusion: self.fusion.clone(),
            params: self.params.cast(),
        }
    }

    pub fn n_cls(&self) -> usize {
        self.cfg.n_cls()
    }

    /// `x`: `(B, 4, D, H, W)`. Training mode (dropout) when `rng` is given.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, rng: Option<&mut SeededRng>) -> Outputs {
        let pyramid = self.backbone.encode(g, p, x);
        let seg_logits = self.backbone.has_decoder().then(|| self.backbone.decode(g, p, x, &pyramid));
        let tumor_prob = match (&self.cmd, seg_logits) {
            (Some(_), Some(s)) => Some(tumor_probability(g, s)),
            _ => None,
        };
        let c_tafe = self.tafe.as_ref().map(|t| t.forward(g, p, &pyramid, rng));
        let cmd = self.cmd.as_ref().map(|c| c.forward(g, p, x, tumor_prob.expect("cmd implies decoder")));
        let logits = match (c_tafe, cmd) {
            (Some(a), Some(b)) => self.fusion.as_ref().expect("fusion with both heads").fuse(g, p, a, b.logits).expect("logit shapes"),
            (Some(a), None) => a,
            (None, Some(b)) => b.logits,
            (None, None) => unreachable!("validated: one head is on"),
        };
        Outputs { pyramid, seg_logits, tumor_prob, c_tafe, cmd, logits }
    }

    /// Joint loss; segmentation is supervised only when enabled and masks
    /// are supplied.
    pub fn loss(&self, g: &mut Graph<T>, out: &Outputs, masks: Option<&[u8]>, labels: &[u8], cfg: &LossConfig) -> Result<LossTerms> {
        let seg = if self.cfg.modules.seg_supervision_on { out.seg_logits.zip(masks) } else { None };
        total_loss(g, seg, out.logits, labels, cfg)
    }

    pub fn input_tensor(&self, cases: &[&Case]) -> Result<Tensor<T>> {
        input_tensor(cases, &self.cfg.backbone)
    }

    /// Class probabilities in evaluation mode, `batch` cases per pass.
    pub fn predict(&self, cases: &[&Case], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(cases.len());
        for chunk in cases.chunks(batch.max(1)) {
            let x = self.input_tensor(chunk)?;
            out.extend(self.predict_tensor(x));
        }
        Ok(out)
    }

    /// Class probabilities for an already assembled input tensor.
    pub fn predict_tensor(&self, x: Tensor<T>) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let out = self.forward(&mut g, &p, xv, None);
        let logits: Vec<f64> = g.value(out.logits).data().iter().map(|v| v.as_f64()).collect();
        class_probabilities(&logits, self.n_cls())
    }
}

/// Stacks the sequences of `cases` into `(B, 4, D, H, W)`.
pub fn input_tensor<T: Float>(cases: &[&Case], cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let dims = cfg.input_size;
    let n = voxel_count(dims);
    let mut data = Vec::with_capacity(cases.len() * 4 * n);
    for c in cases {
        if c.dims() != dims {
            return Err(Error::Shape(format!("case {} has dims {:?}, model expects {dims:?}", c.id, c.dims())));
        }
        for s in Sequence::ALL {
            data.extend(c.sequence(s).data.iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Ok(Tensor::new(&[cases.len(), cfg.in_channels, dims[0], dims[1], dims[2]], data))
}

/// Concatenated mask labels of `cases` (`None` if any case lacks a mask).
pub fn mask_labels(cases: &[&Case]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    for c in cases {
        out.extend_from_slice(&c.mask.as_ref()?.data);
    }
    Some(out)
}

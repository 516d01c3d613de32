//! Single-file checkpoints: `IDHCKPT1` magic, little-endian u64 header
//! length, JSON header (config, config digest, tensor table), then the
//! tensors as little-endian f32.

use std::fs;
use std::path::Path;

use idhnet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};

const MAGIC: &[u8; 8] = b"IDHCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_digest: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

/// Outcome of a non-strict load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the checkpoint or with a different
    /// shape; they keep their current values.
    pub unmatched: Vec<String>,
    /// Checkpoint tensors with no counterpart in the model.
    pub unused: Vec<String>,
}

pub fn save_checkpoint<T: Float>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in net.params.iter() {
        let offset = payload.len();
        payload.extend(t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()));
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, len: t.numel() });
    }
    let header = CheckpointHeader { config_digest: net.cfg.digest(), config: net.cfg.clone(), tensors };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::write(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    let bad = |m: &str| Error::CheckpointMismatch(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let raw = payload.get(e.offset..e.offset + 4 * e.len).ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| bad(&err.to_string()))?;
        tensors.push(t);
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    /// Rebuilds the network described by the checkpoint and loads it.
    pub fn into_network(self) -> Result<Network<f32>> {
        let mut net = Network::new(&self.header.config, 0)?;
        self.apply(&mut net, true)?;
        Ok(net)
    }

    /// Copies matching tensors into `net`. Strict mode requires the config
    /// digest and every name/shape to match.
    pub fn apply<T: Float>(&self, net: &mut Network<T>, strict: bool) -> Result<LoadReport> {
        if strict && self.header.config_digest != net.cfg.digest() {
            return Err(Error::CheckpointMismatch(format!(
                "config digest {} does not match model {}",
                self.header.config_digest,
                net.cfg.digest()
            )));
        }
        let mut report = LoadReport::default();
        let mut used = vec![false; self.tensors.len()];
        let mut updates = Vec::new();
        for (name, t) in net.params.iter() {
            let found = self.header.tensors.iter().position(|e| e.name == name);
            match found {
                Some(i) if self.tensors[i].shape() == t.shape() => {
                    used[i] = true;
                    updates.push((name.to_string(), i));
                }
                Some(i) => {
                    used[i] = true;
                    if strict {
                        return Err(Error::CheckpointMismatch(format!(
                            "{name}: checkpoint shape {:?}, model shape {:?}",
                            self.tensors[i].shape(),
                            t.shape()
                        )));
                    }
                    report.unmatched.push(name.to_string());
                }
                None => {
                    if strict {
                        return Err(Error::CheckpointMismatch(format!("{name} missing from checkpoint")));
                    }
                    report.unmatched.push(name.to_string());
                }
            }
        }
        for (i, u) in used.iter().enumerate() {
            if !u {
                if strict {
                    return Err(Error::CheckpointMismatch(format!("unexpected tensor {}", self.header.tensors[i].name)));
                }
                report.unused.push(self.header.tensors[i].name.clone());
            }
        }
        for (name, i) in updates {
            *net.params.by_name_mut(&name).expect("name from model") = self.tensors[i].cast();
            report.loaded.push(name);
        }
        Ok(report)
    }
}

/// Loads `path` into `net`; see [`Checkpoint::apply`].
pub fn load_checkpoint<T: Float>(net: &mut Network<T>, path: &Path, strict: bool) -> Result<LoadReport> {
    read_checkpoint(path)?.apply(net, strict)
}

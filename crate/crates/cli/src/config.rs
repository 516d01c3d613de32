//! Run configuration: a JSON document with one section per module, merged
//! with `--set key=value` overrides and validated against the defaults.

use std::path::{Path, PathBuf};

use idhnet::backbone::BackboneConfig;
use idhnet::cmd::CmdConfig;
use idhnet::interpret::OcclusionConfig;
use idhnet::loss::LossConfig;
use idhnet::phantom::DatasetConfig;
use idhnet::tafe::TafeConfig;
use idhnet::trainer::{Experiment, TrainConfig};
use idhnet::volume::{Dims, NormRegion};
use idhnet_stats::StdMode;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest CSV; when absent, phantoms are generated from `phantom`.
    pub manifest: Option<PathBuf>,
    pub phantom: DatasetConfig,
    pub norm_region: NormRegion,
    /// Crop size; defaults to the backbone input size.
    pub crop_size: Option<Dims>,
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, phantom: DatasetConfig::default(), norm_region: NormRegion::NonzeroVoxels, crop_size: None, folds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub std_mode: StdMode,
    /// DeLong confidence level.
    pub ci_level: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { std_mode: StdMode::Sample, ci_level: 0.95 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub tafe: TafeConfig,
    pub cmd: CmdConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub occlusion: OcclusionConfig,
}

impl RunConfig {
    pub fn experiment(&self) -> Experiment {
        Experiment {
            backbone: self.backbone.clone(),
            tafe: self.tafe.clone(),
            cmd: self.cmd.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    pub fn crop_size(&self) -> Dims {
        self.data.crop_size.unwrap_or(self.backbone.input_size)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment().validate()?;
        self.data.phantom.validate()?;
        if self.crop_size() != self.backbone.input_size {
            return Err(CliError::Config(format!(
                "data.crop_size {:?} differs from backbone.input_size {:?}",
                self.crop_size(),
                self.backbone.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.metrics.ci_level) || self.metrics.ci_level == 0.0 {
            return Err(CliError::Config(format!("metrics.ci_level {} outside (0, 1)", self.metrics.ci_level)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses `value` as JSON, falling back to a plain string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {part} is not a section")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {key}: parent is not a section")))?;
    obj.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

fn first_leaf(path: String, v: &Value) -> String {
    match v {
        Value::Object(m) if !m.is_empty() => {
            let (k, child) = m.iter().next().expect("non-empty");
            first_leaf(format!("{path}.{k}"), child)
        }
        _ => path,
    }
}

/// Reports the first key of `doc` absent from `schema` by its dotted path.
fn find_unknown(doc: &Value, schema: &Value, path: &str) -> Option<String> {
    let (Value::Object(d), Value::Object(s)) = (doc, schema) else { return None };
    for (k, v) in d {
        let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match s.get(k) {
            None => return Some(first_leaf(p, v)),
            Some(sv) => {
                if let Some(u) = find_unknown(v, sv, &p) {
                    return Some(u);
                }
            }
        }
    }
    None
}

/// Merges file ← overrides, rejects unknown keys, fills defaults and
/// validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(CliError::Config("config root must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let schema = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(key) = find_unknown(&doc, &schema, "") {
        return Err(CliError::Config(format!("unknown key `{key}`")));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc)
        .map_err(|e| CliError::Config(format!("`{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

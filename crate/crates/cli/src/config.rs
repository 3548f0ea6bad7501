//! Run configuration: defaults, JSON files and `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use cellsearch::data::SyntheticSpec;
use cellsearch::optim::{ArchOptConfig, Schedule, WeightOptConfig};
use cellsearch::supernet::NetworkConfig;
use cellsearch::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// `root/<class>/<file>.png`
    Dir(PathBuf),
}

/// Final-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub augment: bool,
    /// Fraction of each class used for training; the rest is held out.
    pub train_ratio: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let w = WeightOptConfig::final_training();
        TrainSection {
            lr0: w.lr0,
            momentum: w.momentum,
            weight_decay: w.weight_decay,
            epochs: w.epochs,
            schedule: w.schedule,
            batch_size: w.batch_size,
            grad_clip: w.grad_clip,
            augment: true,
            train_ratio: 0.5,
        }
    }
}

impl TrainSection {
    pub fn weights(&self) -> WeightOptConfig {
        WeightOptConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            schedule: self.schedule,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub num_runs: usize,
    pub precision: Precision,
    pub data: DataSource,
    pub network: NetworkConfig,
    pub search: WeightOptConfig,
    pub arch: ArchOptConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            num_runs: 3,
            precision: Precision::F32,
            data: DataSource::Synthetic(SyntheticSpec {
                num_classes: 4,
                per_class: 128,
                size: 32,
                seed: 0,
            }),
            network: NetworkConfig::default(),
            search: WeightOptConfig::search(),
            arch: ArchOptConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 {
            return Err(Error::InvalidArgument("num_runs must be at least 1".into()));
        }
        if !(self.train.train_ratio > 0.0 && self.train.train_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train.train_ratio must lie in (0, 1), got {}",
                self.train.train_ratio
            )));
        }
        self.search.validate()?;
        self.arch.validate()?;
        self.train.weights().validate()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if k != "data" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `section.key=value`. The value is read as JSON when it parses,
/// otherwise as a string.
pub fn apply_set(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("--set expects section.key=value, got `{assignment}`")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidArgument(format!("--set: malformed key `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    for (i, key) in keys.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("--set: `{}` is not a section", keys[..i].join("."))))?;
        if i == 1 && keys[0] == "data" && !obj.contains_key(*key) {
            obj.clear();
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        slot = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}

/// Defaults, then the file at `path`, then each `--set` in order. Unknown
/// keys anywhere are rejected.
pub fn resolve(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if !overlay.is_object() {
            return Err(Error::File {
                path: path.to_path_buf(),
                message: "config must be a JSON object".into(),
            });
        }
        merge(&mut value, overlay);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

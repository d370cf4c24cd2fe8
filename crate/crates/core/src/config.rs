//! Experiment configuration: one JSON document covering the search space,
//! supernet shape, search and evaluation schedules, drop rates, data, and
//! diagnostic harness settings.
//!
//! Every section may be omitted (defaults fill it in) but unknown keys are
//! rejected. `--set a.b.c=value` style overrides address fields by dotted
//! path; the value is parsed as JSON and falls back to a plain string.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{DatasetKind, DatasetSpec, Normalization, CIFAR_MEAN, CIFAR_STD};
use crate::diagnostics::DiagnosticsConfig;
use crate::drop::DropConfig;
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::space::{build_space, SearchSpace, SpaceConfig};
use crate::standalone::EvalConfig;
use crate::train::{TrainConfig, WeightOptim};

pub const CONFIG_SCHEMA: u32 = 1;
pub const PRESETS: [&str; 3] = ["desk", "smoke", "paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub space: SpaceConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub drop: DropConfig,
    pub eval: EvalConfig,
    pub data: DatasetSpec,
    pub diagnostics: DiagnosticsConfig,
    /// Root directory for run outputs; not part of the config hash.
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            seed: 0,
            space: SpaceConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            drop: DropConfig::default(),
            eval: EvalConfig::default(),
            data: DatasetSpec::default(),
            diagnostics: DiagnosticsConfig::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Named starting points: `desk` (the default), `smoke` (seconds-long
    /// runs for tests), `paper` (full-size CIFAR-10 settings).
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "desk" => {}
            "smoke" => {
                cfg.net = NetConfig {
                    cells: 3,
                    nodes: 2,
                    channels: 4,
                    ..NetConfig::default()
                };
                cfg.train.epochs = 2;
                cfg.train.batch_size = 16;
                cfg.data.train_samples = 32;
                cfg.data.test_samples = 32;
                cfg.eval.cells = 3;
                cfg.eval.channels = 4;
                cfg.eval.epochs = 1;
                cfg.eval.batch_size = 16;
                cfg.diagnostics = DiagnosticsConfig::smoke();
            }
            "paper" => {
                cfg.net = NetConfig {
                    cells: 14,
                    nodes: 4,
                    channels: 16,
                    ..NetConfig::default()
                };
                cfg.train.epochs = 76;
                cfg.train.batch_size = 96;
                cfg.train.w_optim = WeightOptim::default();
                cfg.eval = EvalConfig {
                    cells: 20,
                    channels: 36,
                    epochs: 600,
                    batch_size: 192,
                    lr: 0.05,
                    cutout: Some(16),
                    aux_weight: Some(0.4),
                    ..EvalConfig::default()
                };
                cfg.data = DatasetSpec {
                    kind: DatasetKind::Cifar10Binary,
                    path: Some(PathBuf::from("data/cifar-10-batches-bin")),
                    classes: 10,
                    train_samples: 50_000,
                    test_samples: 10_000,
                    image_size: 32,
                    channels: 3,
                    noise: 0.0,
                    subset: None,
                    normalization: Some(Normalization {
                        mean: CIFAR_MEAN.to_vec(),
                        std: CIFAR_STD.to_vec(),
                    }),
                };
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        build_space(&self.space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema_version {} (supported: {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        self.search_space()?;
        self.net.validate()?;
        self.train.validate()?;
        self.drop.validate()?;
        self.eval.validate()?;
        self.data.validate()?;
        self.diagnostics.validate()
    }

    /// Applies `key=value` overrides by dotted path and re-validates.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form with `output` cleared.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = Self {
            output: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("loop returns on the last part")
}

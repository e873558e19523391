//! Run configuration, flag overrides, and run manifests.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::dataio::{PairConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::numerics::OptimizerKind;
use crate::training::{AbadObjective, TrainingConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

/// DBSCAN radius: a fixed value or the k-distance heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EpsSetting {
    #[default]
    Auto,
    Fixed(f64),
}

/// ACC decision threshold: fixed, or the one maximizing accuracy on the scored set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSetting {
    Fixed(f64),
    Best,
}

impl Default for ThresholdSetting {
    fn default() -> Self {
        ThresholdSetting::Fixed(1.0)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumberOrWord {
    Number(f64),
    Word(String),
}

fn number_or_word<'de, D: Deserializer<'de>>(d: D, word: &str) -> std::result::Result<Option<f64>, D::Error> {
    match NumberOrWord::deserialize(d) {
        Ok(NumberOrWord::Number(x)) => Ok(Some(x)),
        Ok(NumberOrWord::Word(w)) if w == word => Ok(None),
        _ => Err(serde::de::Error::custom(format!("expected a number or \"{word}\""))),
    }
}

impl Serialize for EpsSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EpsSetting::Auto => s.serialize_str("auto"),
            EpsSetting::Fixed(x) => s.serialize_f64(*x),
        }
    }
}

impl<'de> Deserialize<'de> for EpsSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(number_or_word(d, "auto")?.map_or(EpsSetting::Auto, EpsSetting::Fixed))
    }
}

impl Serialize for ThresholdSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ThresholdSetting::Best => s.serialize_str("best"),
            ThresholdSetting::Fixed(x) => s.serialize_f64(*x),
        }
    }
}

impl<'de> Deserialize<'de> for ThresholdSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(number_or_word(d, "best")?.map_or(ThresholdSetting::Best, ThresholdSetting::Fixed))
    }
}

impl fmt::Display for EpsSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsSetting::Auto => f.write_str("auto"),
            EpsSetting::Fixed(x) => write!(f, "{x}"),
        }
    }
}

/// Every knob of the pipeline. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,

    pub count: usize,
    pub anomaly_fraction: f64,
    pub clusters: usize,
    pub anomaly_offset: f64,
    pub dim: usize,

    pub architecture: Architecture,
    pub embed_dim: usize,

    pub temperature: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub anchors_per_epoch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub abad_objective: AbadObjective,

    pub k: usize,
    pub percentile: f64,

    pub eps: EpsSetting,
    pub min_pts: usize,
    pub radius_percentile: f64,
    pub drift_threshold: f64,

    pub acc_threshold: ThresholdSetting,

    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let train = TrainingConfig::default();
        let pairs = PairConfig::default();
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: synth.seed,
            count: synth.count,
            anomaly_fraction: synth.anomaly_fraction,
            clusters: synth.clusters,
            anomaly_offset: synth.offset,
            dim: synth.dim,
            architecture: Architecture::Crnim,
            embed_dim: crate::models::DEFAULT_EMBED_DIM,
            temperature: train.temperature,
            negatives: pairs.negatives,
            epochs: train.epochs,
            batch_size: train.batch_size,
            anchors_per_epoch: train.anchors_per_epoch,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            abad_objective: train.abad_objective,
            k: pairs.k,
            percentile: pairs.percentile,
            eps: EpsSetting::Auto,
            min_pts: 5,
            radius_percentile: 95.0,
            drift_threshold: 0.2,
            acc_threshold: ThresholdSetting::default(),
            data: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            count: self.count,
            anomaly_fraction: self.anomaly_fraction,
            clusters: self.clusters,
            offset: self.anomaly_offset,
            dim: self.dim,
            seed: self.seed,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            temperature: self.temperature,
            epochs: self.epochs,
            batch_size: self.batch_size,
            anchors_per_epoch: self.anchors_per_epoch,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            abad_objective: self.abad_objective,
            seed: self.seed,
        }
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            k: self.k,
            negatives: self.negatives,
            percentile: self.percentile,
        }
    }

    /// Range checks that do not depend on data.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("`{key}`: {msg}")));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return bad(
                "format_version",
                format!("unsupported version {} (expected {CONFIG_FORMAT_VERSION})", self.format_version),
            );
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", format!("must be positive, got {}", self.temperature));
        }
        if self.negatives == 0 {
            return bad("negatives", "must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        if self.embed_dim < 2 {
            return bad("embed_dim", format!("must be at least 2, got {}", self.embed_dim));
        }
        if self.batch_size == 0 || self.anchors_per_epoch == 0 {
            return bad("batch_size", "batch size and anchors per epoch must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return bad("percentile", format!("must lie in [0, 100], got {}", self.percentile));
        }
        if let EpsSetting::Fixed(e) = self.eps {
            if !(e > 0.0 && e.is_finite()) {
                return bad("eps", format!("must be positive or \"auto\", got {e}"));
            }
        }
        if self.min_pts < 2 {
            return bad("min_pts", format!("must be at least 2, got {}", self.min_pts));
        }
        if !(self.radius_percentile > 0.0 && self.radius_percentile <= 100.0) {
            return bad("radius_percentile", format!("must lie in (0, 100], got {}", self.radius_percentile));
        }
        if !(0.0..=1.0).contains(&self.drift_threshold) {
            return bad("drift_threshold", format!("must lie in [0, 1], got {}", self.drift_threshold));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return bad("anomaly_fraction", format!("must lie in [0, 1], got {}", self.anomaly_fraction));
        }
        Ok(())
    }

    /// Stable digest of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// Builds the effective configuration: `overrides` beat the file, which beats defaults.
pub fn load_config(path: Option<&Path>, overrides: &Map<String, Value>) -> Result<RunConfig> {
    let mut merged = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            if text.trim().is_empty() {
                Map::new()
            } else {
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(Error::Config(format!("{}: expected a JSON object", p.display()))),
                    Err(e) => return Err(Error::Config(format!("{}: {e}", p.display()))),
                }
            }
        }
        None => Map::new(),
    };
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(merged)).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        if key == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("key `{key}`: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// What one subcommand read, wrote, and how long it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            config_hash: config.hash()?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    /// Records an output by its name relative to the run directory.
    pub fn add_output(&mut self, path: &Path) {
        let name = path.file_name().map_or_else(|| path.to_path_buf(), PathBuf::from);
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

//! Transaction records, standardization, ingestion, synthetic data and pair sampling.

mod elliptic;
mod pairs;
mod standardize;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use elliptic::{ingest_elliptic, read_dataset_csv, write_dataset_csv, write_elliptic, EllipticIngest};
pub use pairs::{sample_pairs, PairBatch, PairConfig};
pub use standardize::StandardizationParams;
pub use synthetic::{generate_synthetic, SyntheticSpec, AMOUNT_FEATURE, FREQUENCY_FEATURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Illicit,
    Licit,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Illicit => "illicit",
            Label::Licit => "licit",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "illicit" => Ok(Label::Illicit),
            "licit" => Ok(Label::Licit),
            "unknown" => Ok(Label::Unknown),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }
}

/// One transaction: identifier, feature vector and optional ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Label,
}

/// Records sharing one feature dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<TransactionRecord>,
    dim: usize,
}

impl Dataset {
    pub fn new(records: Vec<TransactionRecord>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.features.len());
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::Data(format!(
                    "record {i} (`{}`) has {} features, expected {dim}",
                    r.id,
                    r.features.len()
                )));
            }
            if let Some(j) = r.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record `{}` feature {j} is not finite", r.id)));
            }
        }
        Ok(Self { records, dim })
    }

    pub fn records(&self) -> &[TransactionRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.records[i].features
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.records.iter().map(|r| r.label)
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.labels().filter(|&l| l == label).count()
    }

    /// Feature rows as a borrowed matrix.
    pub fn rows(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.features.as_slice()).collect()
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

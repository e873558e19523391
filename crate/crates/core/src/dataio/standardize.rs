use serde::{Deserialize, Serialize};

use super::{Dataset, TransactionRecord};
use crate::error::{Error, Result};

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationParams {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("cannot standardize an empty dataset".into()));
        }
        let d = dataset.dim();
        let n = dataset.len() as f64;
        let mut mean = vec![0.0; d];
        for r in dataset.records() {
            for (m, x) in mean.iter_mut().zip(&r.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in dataset.records() {
            for ((v, x), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Features whose standard deviation is zero.
    pub fn constant_features(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn transform(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s == 0.0 { 0.0 } else { (x - m) / s })
            .collect()
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.dim() != self.mean.len() && !dataset.is_empty() {
            return Err(Error::Data(format!(
                "standardizer fitted on {} features, dataset has {}",
                self.mean.len(),
                dataset.dim()
            )));
        }
        let records = dataset
            .records()
            .iter()
            .map(|r| TransactionRecord {
                id: r.id.clone(),
                features: self.transform(&r.features),
                label: r.label,
            })
            .collect();
        Dataset::new(records)
    }
}

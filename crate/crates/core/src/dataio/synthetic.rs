use serde::{Deserialize, Serialize};

use super::{Dataset, Label, TransactionRecord};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Feature index carrying the transfer amount in generated data.
pub const AMOUNT_FEATURE: usize = 0;
/// Feature index carrying the transfer frequency in generated data.
pub const FREQUENCY_FEATURE: usize = 1;

/// Half-width of the per-feature anomaly jitter, as a fraction of the offset.
const JITTER: f64 = 0.5;
/// Cluster centres are uniform in `±CENTER_SPREAD` per feature.
const CENTER_SPREAD: f64 = 10.0;

/// Parameters of the synthetic "normal blobs plus layering anomalies" generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub anomaly_fraction: f64,
    pub clusters: usize,
    /// Anomaly shift on the amount and frequency features, in σ units.
    pub offset: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            anomaly_fraction: 0.05,
            clusters: 2,
            offset: 6.0,
            dim: 16,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_fraction * self.count as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs d >= 2 (amount and frequency features), got {}",
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::InvalidArgument(format!(
                "anomaly fraction must lie in [0, 1], got {}",
                self.anomaly_fraction
            )));
        }
        if self.anomaly_fraction > 0.0 && self.anomaly_fraction * self.count as f64 <= 0.5 {
            return Err(Error::InvalidArgument(format!(
                "anomaly fraction {} of {} records yields no anomalies",
                self.anomaly_fraction, self.count
            )));
        }
        if self.clusters == 0 {
            return Err(Error::InvalidArgument("need at least one base cluster".into()));
        }
        if !self.offset.is_finite() {
            return Err(Error::InvalidArgument("anomaly offset must be finite".into()));
        }
        Ok(())
    }
}

/// Draws normal records from unit-σ Gaussian clusters and anomalies from the
/// same clusters shifted by `+offset σ` on the amount and frequency features.
/// Every anomaly feature also gets uniform jitter of up to `±offset / 2`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::for_stage(spec.seed, "synthetic");
    let centers: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| {
            (0..spec.dim)
                .map(|_| rng.uniform_range(-CENTER_SPREAD, CENTER_SPREAD))
                .collect()
        })
        .collect();

    let n_anom = spec.anomaly_count();
    let mut is_anomaly = vec![false; spec.count];
    is_anomaly[..n_anom].iter_mut().for_each(|a| *a = true);
    rng.shuffle(&mut is_anomaly);

    let records = is_anomaly
        .iter()
        .enumerate()
        .map(|(i, &anomalous)| {
            let center = &centers[rng.index(spec.clusters)];
            let mut features: Vec<f64> = center.iter().map(|c| c + rng.normal()).collect();
            if anomalous {
                for f in features.iter_mut() {
                    *f += spec.offset * JITTER * rng.uniform_range(-1.0, 1.0);
                }
                features[AMOUNT_FEATURE] += spec.offset;
                features[FREQUENCY_FEATURE] += spec.offset;
            }
            TransactionRecord {
                id: format!("tx{i:06}"),
                features,
                label: if anomalous { Label::Illicit } else { Label::Licit },
            }
        })
        .collect();
    Dataset::new(records)
}

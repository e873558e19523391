//! Normal-transaction rules learned by density clustering of embeddings,
//! anomaly scoring against them, and drift-gated rule updates.

mod dbscan;
mod drift;

use std::fmt;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dbscan::{auto_eps, dbscan, Assignment};
pub use drift::{append_audit_log, maybe_update, rule_drift, DriftReport, UpdateDecision, AUDIT_HEADER};

/// Current RuleSet file format.
pub const RULESET_FORMAT_VERSION: u32 = 1;

/// Score returned for an empty rule set.
pub const NO_RULE_SCORE: f64 = f64::MAX;

/// Euclidean distance between equal-length vectors.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "euclidean_distance",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(euclidean_distance_unchecked(a, b))
}

pub(crate) fn euclidean_distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linear-interpolation percentile of an ascending slice; `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
    /// Percentile of member distances used as a rule's radius, in `(0, 100]`.
    pub radius_percentile: f64,
}

impl ClusterConfig {
    pub fn new(eps: f64, min_pts: usize, radius_percentile: f64) -> Result<Self> {
        let c = Self {
            eps,
            min_pts,
            radius_percentile,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        if self.min_pts < 2 {
            return Err(Error::InvalidArgument(format!("min_pts must be >= 2, got {}", self.min_pts)));
        }
        if !(self.radius_percentile > 0.0 && self.radius_percentile <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "radius percentile must lie in (0, 100], got {}",
                self.radius_percentile
            )));
        }
        Ok(())
    }
}

/// Clusters embeddings; `None` marks noise.
pub fn cluster(embeddings: &[&[f64]], config: &ClusterConfig) -> Assignment {
    dbscan(embeddings, config.eps, config.min_pts)
}

/// A normal-transaction group: a ball around a cluster centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: usize,
    pub centroid: Vec<f64>,
    pub radius: f64,
    pub members: usize,
}

/// Version tag `R_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version(pub u32);

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R_{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSetMeta {
    pub dataset_size: usize,
    pub config: ClusterConfig,
    pub created_unix: u64,
    /// Set when clustering found no dense group, so every point scores anomalous.
    pub no_clusters: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub format_version: u32,
    pub version: Version,
    pub rules: Vec<Rule>,
    pub meta: RuleSetMeta,
}

/// Distance ratio to the nearest rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub rule: Option<usize>,
}

impl Score {
    /// Inside the nearest rule's threshold range.
    pub fn is_normal(&self) -> bool {
        self.value <= 1.0
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// One rule per cluster: centroid is the member mean, radius the configured
/// percentile of member-to-centroid distances, floored at `eps / 10`.
pub fn derive_rules(
    embeddings: &[&[f64]],
    assignment: &[Option<usize>],
    config: &ClusterConfig,
    version: Version,
) -> Result<RuleSet> {
    if embeddings.len() != assignment.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings but {} assignments",
            embeddings.len(),
            assignment.len()
        )));
    }
    let n_clusters = assignment.iter().flatten().max().map_or(0, |m| m + 1);
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut rules = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let members: Vec<&[f64]> = embeddings
            .iter()
            .zip(assignment)
            .filter(|(_, a)| **a == Some(c))
            .map(|(e, _)| *e)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut centroid = vec![0.0; dim];
        for m in &members {
            for (s, v) in centroid.iter_mut().zip(*m) {
                *s += v;
            }
        }
        centroid.iter_mut().for_each(|s| *s /= members.len() as f64);
        let mut d: Vec<f64> = members
            .iter()
            .map(|m| euclidean_distance_unchecked(m, &centroid))
            .collect();
        d.sort_by(f64::total_cmp);
        let radius = percentile(&d, config.radius_percentile).max(config.eps / 10.0);
        rules.push(Rule {
            id: rules.len(),
            centroid,
            radius,
            members: members.len(),
        });
    }
    if rules.is_empty() {
        log::warn!("clustering produced no clusters; every point will score anomalous");
    }
    Ok(RuleSet {
        format_version: RULESET_FORMAT_VERSION,
        version,
        meta: RuleSetMeta {
            dataset_size: embeddings.len(),
            config: *config,
            created_unix: now_unix(),
            no_clusters: rules.is_empty(),
        },
        rules,
    })
}

impl RuleSet {
    /// Anomaly score: minimum over rules of `distance / radius`. Ties go to
    /// the lower rule index.
    pub fn score(&self, embedding: &[f64]) -> Score {
        let mut best = Score {
            value: NO_RULE_SCORE,
            rule: None,
        };
        for r in &self.rules {
            let s = euclidean_distance_unchecked(embedding, &r.centroid) / r.radius;
            if best.rule.is_none() || s < best.value {
                best = Score {
                    value: s,
                    rule: Some(r.id),
                };
            }
        }
        best
    }

    pub fn rule(&self, id: usize) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rs: RuleSet = serde_json::from_str(&text)?;
        if rs.format_version != RULESET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "rule set format version {} is not supported",
                rs.format_version
            )));
        }
        let mut ids: Vec<usize> = rs.rules.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != rs.rules.len() {
            return Err(Error::Format("duplicate rule ids".into()));
        }
        Ok(rs)
    }
}

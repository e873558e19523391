//! Rule-set comparison and drift-gated adoption.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{euclidean_distance_unchecked, now_unix, RuleSet, Version};
use crate::error::{Error, Result};

pub const AUDIT_HEADER: &str = "version_from,version_to,drift,theta,adopted,timestamp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Fraction of the reference cohort whose verdict or matched nearest rule changed.
    pub drift: f64,
    /// Fraction whose normal/anomalous verdict flipped.
    pub verdict_flip_fraction: f64,
    /// Fraction whose nearest rule changed under the centroid matching.
    pub changed_assignment_fraction: f64,
    /// Greedy centroid matches as `(old rule id, new rule id)`.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_old: Vec<usize>,
    pub unmatched_new: Vec<usize>,
    pub unmatched_old_fraction: f64,
    pub unmatched_new_fraction: f64,
}

/// Repeatedly pairs the globally closest (old, new) centroids.
fn match_centroids(old: &RuleSet, new: &RuleSet) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(old.rules.len() * new.rules.len());
    for (i, a) in old.rules.iter().enumerate() {
        for (j, b) in new.rules.iter().enumerate() {
            pairs.push((euclidean_distance_unchecked(&a.centroid, &b.centroid), i, j));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_old = vec![false; old.rules.len()];
    let mut used_new = vec![false; new.rules.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_old[i] && !used_new[j] {
            used_old[i] = true;
            used_new[j] = true;
            out.push((old.rules[i].id, new.rules[j].id));
        }
    }
    out
}

/// Compares two rule-set versions on a reference cohort.
pub fn rule_drift(old: &RuleSet, new: &RuleSet, reference: &[&[f64]]) -> Result<DriftReport> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("drift needs a non-empty reference cohort".into()));
    }
    let matches = match_centroids(old, new);
    let mapped = |old_id: usize| matches.iter().find(|(o, _)| *o == old_id).map(|(_, n)| *n);

    let (mut changed, mut flips, mut reassigned) = (0usize, 0usize, 0usize);
    for z in reference {
        let before = old.score(z);
        let after = new.score(z);
        let flip = before.is_normal() != after.is_normal();
        let moved = before.rule.and_then(mapped) != after.rule;
        flips += usize::from(flip);
        reassigned += usize::from(moved);
        changed += usize::from(flip || moved);
    }
    let n = reference.len() as f64;
    let unmatched_old: Vec<usize> = old
        .rules
        .iter()
        .map(|r| r.id)
        .filter(|id| !matches.iter().any(|(o, _)| o == id))
        .collect();
    let unmatched_new: Vec<usize> = new
        .rules
        .iter()
        .map(|r| r.id)
        .filter(|id| !matches.iter().any(|(_, m)| m == id))
        .collect();
    let frac = |k: usize, total: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    Ok(DriftReport {
        drift: changed as f64 / n,
        verdict_flip_fraction: flips as f64 / n,
        changed_assignment_fraction: reassigned as f64 / n,
        unmatched_old_fraction: frac(unmatched_old.len(), old.rules.len()),
        unmatched_new_fraction: frac(unmatched_new.len(), new.rules.len()),
        matches,
        unmatched_old,
        unmatched_new,
    })
}

/// Outcome of [`maybe_update`], one audit-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDecision {
    pub version_from: Version,
    pub version_to: Version,
    pub drift: f64,
    pub theta: f64,
    pub adopted: bool,
    pub timestamp: u64,
}

impl UpdateDecision {
    pub fn audit_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.version_from, self.version_to, self.drift, self.theta, self.adopted, self.timestamp
        )
    }
}

/// Adopts `candidate` as the next version iff its drift from `active`
/// strictly exceeds `theta`.
pub fn maybe_update(
    active: &RuleSet,
    candidate: &RuleSet,
    theta: f64,
    reference: &[&[f64]],
) -> Result<(RuleSet, UpdateDecision, DriftReport)> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("drift threshold must lie in [0, 1], got {theta}")));
    }
    let report = rule_drift(active, candidate, reference)?;
    let adopted = report.drift > theta;
    let chosen = if adopted {
        let mut next = candidate.clone();
        next.version = Version(active.version.0 + 1);
        next
    } else {
        active.clone()
    };
    let decision = UpdateDecision {
        version_from: active.version,
        version_to: chosen.version,
        drift: report.drift,
        theta,
        adopted,
        timestamp: now_unix(),
    };
    log::info!(
        "rule update {} -> {}: drift {:.4} vs theta {theta} ({})",
        decision.version_from,
        decision.version_to,
        decision.drift,
        if adopted { "adopted" } else { "retained" }
    );
    Ok((chosen, decision, report))
}

/// Appends `decision` to the audit log, writing the header on first use.
pub fn append_audit_log(path: &Path, decision: &UpdateDecision) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{AUDIT_HEADER}")?;
    }
    writeln!(f, "{}", decision.audit_line())?;
    Ok(())
}

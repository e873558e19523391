use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::squared_distance;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::rules::percentile;

/// How positives and negatives are chosen for each anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Positive is drawn from this many nearest neighbours.
    pub k: usize,
    /// Negatives per anchor.
    pub negatives: usize,
    /// Negatives lie beyond this percentile of the anchor's distances.
    pub percentile: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            k: 5,
            negatives: 8,
            percentile: 50.0,
        }
    }
}

/// Anchor / positive / negatives index triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    /// `negatives[i]` holds the negatives of `anchors[i]`.
    pub negatives: Vec<Vec<usize>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// For each anchor draws one positive uniformly from its `k` nearest
/// neighbours and `negatives` records from those farther away than the
/// configured percentile of its distances.
///
/// Negatives within a row are distinct whenever the far pool is large
/// enough; smaller pools are sampled with replacement.
pub fn sample_pairs(rows: &[&[f64]], anchors: &[usize], config: &PairConfig, rng: &mut SeededRng) -> Result<PairBatch> {
    let n = rows.len();
    let required = config.k + config.negatives + 1;
    if n < required {
        return Err(Error::InvalidArgument(format!(
            "pair sampling needs at least k + N + 1 = {required} records, got {n}"
        )));
    }
    if config.k == 0 || config.negatives == 0 {
        return Err(Error::InvalidArgument("k and N must be positive".into()));
    }
    if !(config.percentile >= 0.0 && config.percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in [0, 100], got {}",
            config.percentile
        )));
    }

    let mut batch = PairBatch {
        anchors: Vec::with_capacity(anchors.len()),
        positives: Vec::with_capacity(anchors.len()),
        negatives: Vec::with_capacity(anchors.len()),
    };
    let mut dist = vec![0.0; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for &a in anchors {
        if a >= n {
            return Err(Error::InvalidArgument(format!("anchor {a} out of range")));
        }
        for (j, r) in rows.iter().enumerate() {
            dist[j] = squared_distance(rows[a], r).sqrt();
        }
        order.clear();
        order.extend((0..n).filter(|&j| j != a));
        order.sort_by(|&x, &y| dist[x].partial_cmp(&dist[y]).unwrap_or(Ordering::Equal).then(x.cmp(&y)));

        let positive = order[rng.index(config.k)];

        let sorted: Vec<f64> = order.iter().map(|&j| dist[j]).collect();
        let cut = percentile(&sorted, config.percentile);
        let far: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&j| dist[j] > cut && j != positive)
            .collect();
        let pool: Vec<usize> = if far.is_empty() {
            // Every distance ties at the cut: fall back to the farthest records.
            order
                .iter()
                .rev()
                .copied()
                .filter(|&j| j != positive)
                .take(config.negatives)
                .collect()
        } else {
            far
        };
        let negatives = if pool.len() >= config.negatives {
            let mut pool = pool;
            // partial Fisher-Yates
            for i in 0..config.negatives {
                let j = i + rng.index(pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(config.negatives);
            pool
        } else {
            (0..config.negatives).map(|_| pool[rng.index(pool.len())]).collect()
        };

        batch.anchors.push(a);
        batch.positives.push(positive);
        batch.negatives.push(negatives);
    }
    Ok(batch)
}

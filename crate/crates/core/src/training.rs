//! Contrastive objective and the training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{sample_pairs, Dataset, PairConfig};
use crate::error::{Error, Result};
use crate::models::{Architecture, EncoderModel, NORMALIZE_FLOOR};
use crate::numerics::{Graph, OptimizerKind, OptimizerState, SeededRng, Tensor, Var};

pub const LOSS_CSV_HEADER: &str = "epoch,mean_loss";

/// Weight of the reconstruction term when ABAD trains jointly.
pub const RECONSTRUCTION_WEIGHT: f64 = 1.0;

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector is undefined".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `-ln(e^{s+/τ} / (e^{s+/τ} + Σ e^{s-/τ}))` evaluated with log-sum-exp.
pub fn info_nce_from_similarities(positive: f64, negatives: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("at least one negative is required".into()));
    }
    let logits: Vec<f64> = std::iter::once(positive).chain(negatives.iter().copied()).map(|s| s / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = logits[1..].iter().map(|l| (l - m).exp()).sum();
    if logits[0] == m {
        // ln(1 + Σ exp(l_k - l_0)) stays positive even when the sum is tiny.
        Ok(rest.ln_1p())
    } else {
        Ok(m - logits[0] + ((logits[0] - m).exp() + rest).ln())
    }
}

pub fn info_nce_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    let pos = cosine_similarity(anchor, positive)?;
    let neg = negatives
        .iter()
        .map(|n| cosine_similarity(anchor, n))
        .collect::<Result<Vec<_>>>()?;
    info_nce_from_similarities(pos, &neg, tau)
}

/// Mean InfoNCE over a batch: `anchors, positives: [B, e]`, `negatives: [B, N, e]`.
pub fn info_nce_graph(g: &mut Graph, anchors: Var, positives: Var, negatives: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let ns = g.shape(negatives).to_vec();
    if ns.len() != 3 || g.shape(anchors) != [ns[0], ns[2]] || g.shape(positives) != [ns[0], ns[2]] {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: g.shape(anchors).to_vec(),
            rhs: ns,
        });
    }
    let (b, n) = (ns[0], ns[1]);
    let a = g.l2_normalize(anchors, NORMALIZE_FLOOR)?;
    let p = g.l2_normalize(positives, NORMALIZE_FLOOR)?;
    let q = g.l2_normalize(negatives, NORMALIZE_FLOOR)?;

    let ap = g.mul(a, p)?;
    let pos = g.sum(ap, 1)?;
    let pos = g.reshape(pos, &[b, 1])?;
    let a_rep = g.repeat(a, 1, n)?;
    let aq = g.mul(a_rep, q)?;
    let neg = g.sum(aq, 2)?;
    let logits = g.concat(&[pos, neg], 1)?;
    let logits = g.affine(logits, 1.0 / tau, 0.0);

    // Row maxima enter as constants; the shift cancels in the gradient.
    let lv = g.value(logits).clone();
    let maxima: Vec<f64> = lv
        .values()
        .chunks(n + 1)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = g.input(Tensor::new(vec![b], maxima)?);
    let m_rep = g.repeat(m, 1, n + 1)?;
    let shifted = g.sub(logits, m_rep)?;
    let e = g.exp(shifted);
    let s = g.sum(e, 1)?;
    let lse = g.ln(s);
    let lse = g.add(lse, m)?;
    let first = g.narrow(logits, 1, 0, 1)?;
    let first = g.reshape(first, &[b])?;
    let per_anchor = g.sub(lse, first)?;
    g.mean(per_anchor, 0)
}

/// Mean squared error between two equally shaped `[B, d]` values, as a scalar.
fn mse_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let diff = g.sub(x, y)?;
    let sq = g.mul(diff, diff)?;
    let rows = g.mean(sq, 1)?;
    g.mean(rows, 0)
}

/// What ABAD minimizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbadObjective {
    /// Contrastive plus reconstruction loss.
    #[default]
    Joint,
    ReconstructionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub temperature: f64,
    pub epochs: usize,
    /// Anchors per optimizer step.
    pub batch_size: usize,
    /// Anchors drawn (without replacement) per epoch.
    pub anchors_per_epoch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub abad_objective: AbadObjective,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            epochs: 30,
            batch_size: 32,
            anchors_per_epoch: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            abad_objective: AbadObjective::Joint,
            seed: 7,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if self.batch_size == 0 || self.anchors_per_epoch == 0 {
            return Err(Error::InvalidArgument("batch size and anchors per epoch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean training loss of each epoch, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve(pub Vec<f64>);

impl LossCurve {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<f64> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.0.last().copied()
    }

    /// `epoch,mean_loss` rows, epochs numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOSS_CSV_HEADER}\n");
        for (i, v) in self.0.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Loss of one batch; returns the scalar loss node.
fn batch_loss(
    g: &mut Graph,
    model: &EncoderModel,
    p: &[Var],
    rows: &[&[f64]],
    batch: &crate::dataio::PairBatch,
    cfg: &TrainingConfig,
) -> Result<Var> {
    let b = batch.len();
    let n = batch.negatives.first().map_or(0, Vec::len);
    let anchor_rows: Vec<&[f64]> = batch.anchors.iter().map(|&i| rows[i]).collect();
    let contrastive = model.architecture() != Architecture::Abad || cfg.abad_objective == AbadObjective::Joint;

    let mut loss = None;
    if contrastive {
        let mut stacked = anchor_rows.clone();
        stacked.extend(batch.positives.iter().map(|&i| rows[i]));
        stacked.extend(batch.negatives.iter().flatten().map(|&i| rows[i]));
        let x = g.input(Tensor::from_rows(&stacked)?);
        let z = model.forward(g, p, x)?;
        let e = model.embed_dim();
        let za = g.narrow(z, 0, 0, b)?;
        let zp = g.narrow(z, 0, b, b)?;
        let zn = g.narrow(z, 0, 2 * b, b * n)?;
        let zn = g.reshape(zn, &[b, n, e])?;
        loss = Some(info_nce_graph(g, za, zp, zn, cfg.temperature)?);
    }
    if model.architecture() == Architecture::Abad {
        let x = g.input(Tensor::from_rows(&anchor_rows)?);
        let r = model.reconstruct_graph(g, p, x)?;
        let mse = mse_graph(g, x, r)?;
        let mse = g.affine(mse, RECONSTRUCTION_WEIGHT, 0.0);
        loss = Some(match loss {
            Some(l) => g.add(l, mse)?,
            None => mse,
        });
    }
    loss.ok_or_else(|| Error::InvalidArgument("no training objective selected".into()))
}

/// Trains `model` in place on a standardized dataset and returns the loss curve.
pub fn train(model: &mut EncoderModel, data: &Dataset, pairs: &PairConfig, cfg: &TrainingConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if data.dim() != model.dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: vec![data.dim()],
            rhs: vec![model.dim()],
        });
    }
    let rows = data.rows();
    let mut rng = SeededRng::for_stage(cfg.seed, "train");
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let names = model.param_names().to_vec();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        rng.shuffle(&mut order);
        order.truncate(cfg.anchors_per_epoch.min(rows.len()));

        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, anchors) in order.chunks(cfg.batch_size).enumerate() {
            let batch = sample_pairs(&rows, anchors, pairs, &mut rng)?;
            let mut g = Graph::new();
            let p = model.register(&mut g);
            let loss = batch_loss(&mut g, model, &p, &rows, &batch, cfg)?;
            let value = g.value(loss).values()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, step: step + 1, value });
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = p.iter().map(|&v| grads.of(v)).collect();
            opt.step(model.params_mut(), &grads, &names)?;
            total += value;
            steps += 1;
        }
        let mean = total / steps as f64;
        log::debug!("{} epoch {}: mean loss {mean:.6}", model.architecture(), epoch + 1);
        curve.push(mean);
    }
    Ok(LossCurve(curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::numerics::gradcheck::{central_difference, relative_error, STEP};
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = [1.0, 0.0];
        let negs: [&[f64]; 2] = [&[0.0, 1.0], &[0.0, -1.0]];
        let l1 = info_nce_loss(&a, &a, &negs, 1.0).unwrap();
        assert!((l1 - (1.0 + 2.0 / 1f64.exp()).ln()).abs() < 1e-12);
        assert!((l1 - 0.551445).abs() < 1e-6);
        let l2 = info_nce_loss(&a, &a, &negs, 0.5).unwrap();
        assert!((l2 - (1.0 + 2.0 / 2f64.exp()).ln()).abs() < 1e-12);
        assert!((l2 - 0.2395448).abs() < 1e-6);
        let eq = info_nce_from_similarities(0.3, &[0.3, 0.3, 0.3], 0.07).unwrap();
        assert!((eq - 4f64.ln()).abs() < 1e-12);
        assert!(info_nce_loss(&a, &a, &negs, 0.0).is_err());
        assert!(info_nce_loss(&a, &a, &negs, -1.0).is_err());
        assert!(info_nce_loss(&a, &[0.0, 0.0], &negs, 1.0).is_err());
    }

    #[test]
    fn tiny_temperature_stays_finite() {
        let l = info_nce_from_similarities(-1.0, &[1.0], 1e-4).unwrap();
        assert!((l - 2e4).abs() < 1e-6);
    }

    #[test]
    fn dominant_positive_is_still_positive() {
        // exp(-40) is far below one ulp of 1.0
        let l = info_nce_from_similarities(1.0, &[-1.0], 0.05).unwrap();
        assert!(l > 0.0);
        assert!((l - (-40.0f64).exp()).abs() < 1e-30);
    }

    fn graph_loss(a: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> (f64, Vec<f64>) {
        let e = a.len();
        let mut g = Graph::new();
        let va = g.input(Tensor::new(vec![1, e], a.to_vec()).unwrap());
        let vp = g.input(Tensor::new(vec![1, e], p.to_vec()).unwrap());
        let vn = g.input(Tensor::new(vec![1, negs.len(), e], negs.concat()).unwrap());
        let l = info_nce_graph(&mut g, va, vp, vn, tau).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).values()[0], grads.of(va).into_values())
    }

    #[test]
    fn graph_loss_matches_scalar_and_differences() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let mut v = || (0..4).map(|_| rng.normal()).collect::<Vec<f64>>();
            let (a, p) = (v(), v());
            let negs: Vec<Vec<f64>> = (0..3).map(|_| v()).collect();
            let nref: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let (value, grad) = graph_loss(&a, &p, &negs, 0.3);
            assert!((value - info_nce_loss(&a, &p, &nref, 0.3).unwrap()).abs() < 1e-9);
            let mut x = a.clone();
            for i in 0..4 {
                let numeric = central_difference(&mut x, i, STEP, |x| info_nce_loss(x, &p, &nref, 0.3).unwrap());
                assert!(relative_error(grad[i], numeric) < 1e-4);
            }
        }
    }

    #[test]
    fn batched_loss_is_mean_of_rows() {
        let a = [vec![1.0, 0.5], vec![-0.2, 0.9]];
        let p = [vec![0.8, 0.4], vec![0.3, 0.3]];
        let n = [[vec![0.0, 1.0], vec![-1.0, 0.1]], [vec![1.0, 1.0], vec![0.5, -2.0]]];
        let mut g = Graph::new();
        let va = g.input(Tensor::from_rows(&a).unwrap());
        let vp = g.input(Tensor::from_rows(&p).unwrap());
        let flat: Vec<f64> = n.iter().flatten().flatten().copied().collect();
        let vn = g.input(Tensor::new(vec![2, 2, 2], flat).unwrap());
        let l = info_nce_graph(&mut g, va, vp, vn, 0.2).unwrap();
        let expect = (0..2)
            .map(|i| info_nce_loss(&a[i], &p[i], &[&n[i][0], &n[i][1]], 0.2).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((g.value(l).values()[0] - expect).abs() < 1e-9);
    }

    fn vec_strategy(e: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, e).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn loss_is_positive(a in vec_strategy(3), p in vec_strategy(3), n in prop::collection::vec(vec_strategy(3), 1..6), tau in 0.05f64..2.0) {
            let nref: Vec<&[f64]> = n.iter().map(Vec::as_slice).collect();
            prop_assert!(info_nce_loss(&a, &p, &nref, tau).unwrap() > 0.0);
        }

        #[test]
        fn scale_invariance(a in vec_strategy(3), p in vec_strategy(3), n in vec_strategy(3), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let c = cosine_similarity(&a, &p).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tp: Vec<f64> = p.iter().map(|x| x * t).collect();
            prop_assert!((cosine_similarity(&sa, &tp).unwrap() - c).abs() < 1e-12);
            let l = info_nce_loss(&a, &p, &[&n], 0.1).unwrap();
            let ls = info_nce_loss(&sa, &tp, &[&n], 0.1).unwrap();
            prop_assert!((l - ls).abs() < 1e-9);
        }

        #[test]
        fn adding_a_negative_increases_loss(pos in -1.0f64..1.0, negs in prop::collection::vec(-1.0f64..1.0, 1..8), extra in -1.0f64..1.0, tau in 0.05f64..2.0) {
            let l = info_nce_from_similarities(pos, &negs, tau).unwrap();
            let mut more = negs.clone();
            more.push(extra);
            prop_assert!(info_nce_from_similarities(pos, &more, tau).unwrap() > l);
        }

        #[test]
        fn equal_similarities_give_ln_n_plus_one(s in -1.0f64..1.0, n in 1usize..16, tau in 0.01f64..5.0) {
            let l = info_nce_from_similarities(s, &vec![s; n], tau).unwrap();
            prop_assert!((l - ((n + 1) as f64).ln()).abs() < 1e-9);
        }
    }

    fn toy(count: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            count,
            anomaly_fraction: 0.0,
            dim: 8,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn small_cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            anchors_per_epoch: 64,
            batch_size: 16,
            learning_rate: 3e-3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = toy(60);
        let mut m = EncoderModel::build(Architecture::SimpleCnn, 8, 4, &mut SeededRng::new(1)).unwrap();
        let before = m.clone();
        let curve = train(&mut m, &data, &PairConfig::default(), &small_cfg(0)).unwrap();
        assert!(curve.is_empty());
        assert_eq!(m, before);
        assert_eq!(curve.to_csv(), "epoch,mean_loss\n");
    }

    #[test]
    fn training_reduces_loss_on_two_blobs() {
        let data = toy(200);
        let mut m = EncoderModel::build(Architecture::SimpleCnn, 8, 8, &mut SeededRng::new(1)).unwrap();
        let curve = train(&mut m, &data, &PairConfig::default(), &small_cfg(30)).unwrap();
        assert_eq!(curve.len(), 30);
        assert!(curve.values().iter().all(|&v| v > 0.0));
        assert!(curve.last().unwrap() < curve.first().unwrap(), "{:?}", curve.values());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(80);
        let run = || {
            let mut m = EncoderModel::build(Architecture::HybridCnnGru, 8, 4, &mut SeededRng::new(2)).unwrap();
            let c = train(&mut m, &data, &PairConfig::default(), &small_cfg(3)).unwrap();
            (m, c)
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn abad_objectives() {
        let data = toy(60);
        for objective in [AbadObjective::Joint, AbadObjective::ReconstructionOnly] {
            let mut m = EncoderModel::build(Architecture::Abad, 8, 4, &mut SeededRng::new(4)).unwrap();
            let cfg = TrainingConfig {
                abad_objective: objective,
                ..small_cfg(5)
            };
            let curve = train(&mut m, &data, &PairConfig::default(), &cfg).unwrap();
            assert!(curve.last().unwrap() < curve.first().unwrap());
        }
    }

    #[test]
    fn reconstruction_learns_repeated_vector() {
        let v: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let records = (0..20)
            .map(|i| crate::dataio::TransactionRecord {
                id: format!("r{i}"),
                features: v.clone(),
                label: crate::dataio::Label::Unknown,
            })
            .collect();
        let data = Dataset::new(records).unwrap();
        let mut m = EncoderModel::build(Architecture::Abad, 6, 3, &mut SeededRng::new(5)).unwrap();
        let cfg = TrainingConfig {
            abad_objective: AbadObjective::ReconstructionOnly,
            epochs: 200,
            anchors_per_epoch: 20,
            batch_size: 20,
            learning_rate: 1e-2,
            ..TrainingConfig::default()
        };
        let pairs = PairConfig {
            k: 2,
            negatives: 2,
            percentile: 50.0,
        };
        train(&mut m, &data, &pairs, &cfg).unwrap();
        let far: Vec<f64> = v.iter().map(|x| -5.0 * x).collect();
        assert!(m.reconstruction_error(&v).unwrap() < m.reconstruction_error(&far).unwrap());
    }

    #[test]
    fn nan_input_aborts_with_diagnostics() {
        let data = toy(60);
        let mut m = EncoderModel::build(Architecture::SimpleCnn, 8, 4, &mut SeededRng::new(1)).unwrap();
        let head = m.params().len() - 2;
        m.params_mut()[head].values_mut()[0] = f64::NAN;
        let err = train(&mut m, &data, &PairConfig::default(), &small_cfg(2)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 1, .. }), "{err}");
    }

    #[test]
    fn loss_csv_format() {
        let c = LossCurve(vec![1.5, 0.25]);
        assert_eq!(c.to_csv(), "epoch,mean_loss\n1,1.5\n2,0.25\n");
    }
}

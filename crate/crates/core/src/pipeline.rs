//! End-to-end stages: fit an encoder, derive rules, score, evaluate, benchmark.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{EpsSetting, RunConfig, ThresholdSetting};
use crate::dataio::{Dataset, StandardizationParams};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, best_threshold, EvaluationReport, ModelCurves, ReportRow, Roc, ScoredLabel};
use crate::models::{Architecture, EncoderModel};
use crate::numerics::SeededRng;
use crate::rules::{auto_eps, cluster, derive_rules, percentile, ClusterConfig, RuleSet, Score, Version};
use crate::training::{train, LossCurve};

pub const MODEL_FILE: &str = "model.json";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const ENCODER_META_FILE: &str = "encoder.json";
pub const RULES_FILE: &str = "rules.json";
pub const SCORES_HEADER: &str = "id,score,verdict";

/// Percentile of training reconstruction errors that maps to an ABAD score of 1.
const RECONSTRUCTION_SCALE_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    reconstruction_scale: Option<f64>,
}

/// A trained encoder with the standardization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEncoder {
    pub standardizer: StandardizationParams,
    pub model: EncoderModel,
    /// ABAD only: divides reconstruction errors so the rule boundary 1.0 applies.
    pub reconstruction_scale: Option<f64>,
}

impl TrainedEncoder {
    pub fn architecture(&self) -> Architecture {
        self.model.architecture()
    }

    /// Unit-length embeddings of raw (unstandardized) records.
    pub fn embed(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let std = self.standardizer.apply(data)?;
        self.model.embed_normalized_batch(&std.rows())
    }

    fn reconstruction_errors(&self, data: &Dataset) -> Result<Vec<f64>> {
        let std = self.standardizer.apply(data)?;
        self.model.reconstruction_error_batch(&std.rows())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join(MODEL_FILE))?;
        std::fs::write(dir.join(STANDARDIZER_FILE), serde_json::to_string(&self.standardizer)?)?;
        let meta = EncoderMeta {
            reconstruction_scale: self.reconstruction_scale,
        };
        std::fs::write(dir.join(ENCODER_META_FILE), serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = EncoderModel::load(&dir.join(MODEL_FILE))?;
        let standardizer: StandardizationParams =
            serde_json::from_str(&std::fs::read_to_string(dir.join(STANDARDIZER_FILE))?)?;
        let meta: EncoderMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(ENCODER_META_FILE))?)?;
        if standardizer.mean.len() != model.dim() {
            return Err(Error::Format(format!(
                "standardizer has {} features but the model expects {}",
                standardizer.mean.len(),
                model.dim()
            )));
        }
        Ok(Self {
            standardizer,
            model,
            reconstruction_scale: meta.reconstruction_scale,
        })
    }
}

/// Fits the standardizer on `data`, builds and trains `arch`.
pub fn train_encoder(arch: Architecture, data: &Dataset, cfg: &RunConfig) -> Result<(TrainedEncoder, LossCurve)> {
    cfg.validate()?;
    let standardizer = StandardizationParams::fit(data)?;
    let std = standardizer.apply(data)?;
    let mut rng = SeededRng::for_stage(cfg.seed, &format!("init/{}", arch.tag()));
    let mut model = EncoderModel::build(arch, data.dim(), cfg.embed_dim, &mut rng)?;
    let curve = train(&mut model, &std, &cfg.pair_config(), &cfg.training_config())?;
    let reconstruction_scale = if arch == Architecture::Abad {
        let mut errs = model.reconstruction_error_batch(&std.rows())?;
        errs.sort_by(f64::total_cmp);
        Some(percentile(&errs, RECONSTRUCTION_SCALE_PERCENTILE).max(f64::MIN_POSITIVE))
    } else {
        None
    };
    log::info!(
        "trained {} ({} parameters): loss {:?} -> {:?}",
        arch.display_name(),
        model.parameter_count(),
        curve.first(),
        curve.last()
    );
    Ok((
        TrainedEncoder {
            standardizer,
            model,
            reconstruction_scale,
        },
        curve,
    ))
}

/// Clusters the embeddings of `data` into a rule set tagged `version`.
pub fn derive_rule_set(encoder: &TrainedEncoder, data: &Dataset, cfg: &RunConfig, version: Version) -> Result<RuleSet> {
    let z = encoder.embed(data)?;
    let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let eps = match cfg.eps {
        EpsSetting::Fixed(e) => e,
        EpsSetting::Auto => {
            let e = auto_eps(&refs, cfg.min_pts);
            log::info!("auto eps = {e:.6} (median distance to {}-th neighbour)", cfg.min_pts);
            if e > 0.0 {
                e
            } else {
                // All embeddings coincide at this density; any positive radius joins them.
                f64::MIN_POSITIVE.sqrt()
            }
        }
    };
    let config = ClusterConfig::new(eps, cfg.min_pts, cfg.radius_percentile)?;
    let assignment = cluster(&refs, &config);
    let noise = assignment.iter().filter(|a| a.is_none()).count();
    let rules = derive_rules(&refs, &assignment, &config, version)?;
    log::info!("{version}: {} rules, {noise} of {} points are noise", rules.rules.len(), z.len());
    Ok(rules)
}

/// Encoder plus active rule set.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub encoder: TrainedEncoder,
    pub rules: RuleSet,
}

impl Detector {
    /// Rule scores; ABAD reports its scaled reconstruction error instead, with
    /// the nearest rule still attached.
    pub fn score(&self, data: &Dataset) -> Result<Vec<Score>> {
        let z = self.encoder.embed(data)?;
        let mut scores: Vec<Score> = z.iter().map(|e| self.rules.score(e)).collect();
        if let Some(scale) = self.encoder.reconstruction_scale {
            let errs = self.encoder.reconstruction_errors(data)?;
            for (s, e) in scores.iter_mut().zip(errs) {
                s.value = e / scale;
            }
        }
        Ok(scores)
    }
}

pub fn fit_detector(arch: Architecture, data: &Dataset, cfg: &RunConfig) -> Result<(Detector, LossCurve)> {
    let (encoder, curve) = train_encoder(arch, data, cfg)?;
    let rules = derive_rule_set(&encoder, data, cfg, Version(0))?;
    Ok((Detector { encoder, rules }, curve))
}

/// `id,score,verdict` rows.
pub fn scores_csv(data: &Dataset, scores: &[Score]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for (r, s) in data.records().iter().zip(scores) {
        let verdict = if s.is_normal() { "normal" } else { "anomalous" };
        out.push_str(&format!("{},{},{}\n", r.id, s.value, verdict));
    }
    out
}

/// Reads an `id,score,verdict` file back into `(id, score)` pairs.
pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse = |line: u64, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| parse(1, e.to_string()))?;
    if header.len() < 2 || &header[0] != "id" || &header[1] != "score" {
        return Err(parse(1, format!("expected header `{SCORES_HEADER}`")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let score: f64 = rec[1]
            .parse()
            .map_err(|_| parse(line, format!("bad score `{}`", &rec[1])))?;
        out.push((rec[0].to_string(), score));
    }
    Ok(out)
}

/// Scores of `data`'s records looked up by id from `(id, score)` pairs.
pub fn align_scores(data: &Dataset, scores: &[(String, f64)]) -> Result<Vec<f64>> {
    let by_id: std::collections::HashMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    data.records()
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("no score for record `{}`", r.id)))
        })
        .collect()
}

/// Accuracy and ROC of one model over the labeled records.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub acc_percent: f64,
    pub threshold: f64,
    pub roc: Roc,
}

pub fn evaluate_scores(data: &Dataset, scores: &[f64], threshold: ThresholdSetting) -> Result<Evaluation> {
    if data.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} records but {} scores",
            data.len(),
            scores.len()
        )));
    }
    let scored: Vec<ScoredLabel> = data
        .records()
        .iter()
        .zip(scores)
        .filter_map(|(r, &s)| ScoredLabel::from_label(s, r.label))
        .collect();
    let roc = auroc(&scored)?;
    let threshold = match threshold {
        ThresholdSetting::Fixed(t) => t,
        ThresholdSetting::Best => best_threshold(&scored)?,
    };
    Ok(Evaluation {
        acc_percent: accuracy(&scored, threshold)?,
        threshold,
        roc,
    })
}

/// One trained and evaluated model of a benchmark.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub architecture: Architecture,
    pub detector: Detector,
    pub loss: LossCurve,
    pub scores: Vec<Score>,
    pub evaluation: Evaluation,
}

pub fn run_model(arch: Architecture, data: &Dataset, cfg: &RunConfig) -> Result<ModelRun> {
    let (detector, loss) = fit_detector(arch, data, cfg)?;
    let scores = detector.score(data)?;
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let evaluation = evaluate_scores(data, &values, cfg.acc_threshold)?;
    Ok(ModelRun {
        architecture: arch,
        detector,
        loss,
        scores,
        evaluation,
    })
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: EvaluationReport,
    pub runs: Vec<ModelRun>,
}

/// Trains and evaluates `archs` on the same data with the same configuration.
pub fn benchmark(data: &Dataset, cfg: &RunConfig, archs: &[Architecture]) -> Result<BenchmarkOutcome> {
    let mut runs = Vec::with_capacity(archs.len());
    for &arch in archs {
        runs.push(run_model(arch, data, cfg)?);
    }
    let report = EvaluationReport {
        rows: runs
            .iter()
            .map(|r| ReportRow {
                model: r.architecture.display_name().to_string(),
                acc_percent: r.evaluation.acc_percent,
                auroc: r.evaluation.roc.auroc,
            })
            .collect(),
        curves: runs
            .iter()
            .map(|r| ModelCurves {
                model: r.architecture.display_name().to_string(),
                roc: r.evaluation.roc.points.clone(),
            })
            .collect(),
        config: serde_json::to_value(cfg)?,
        seed: cfg.seed,
    };
    Ok(BenchmarkOutcome { report, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Label, TransactionRecord};

    fn small_config() -> RunConfig {
        RunConfig {
            count: 200,
            epochs: 2,
            anchors_per_epoch: 64,
            ..RunConfig::default()
        }
    }

    #[test]
    fn scores_csv_round_trips() {
        let cfg = small_config();
        let data = generate_synthetic(&cfg.synthetic_spec()).unwrap();
        let (detector, _) = fit_detector(Architecture::SimpleCnn, &data, &cfg).unwrap();
        let scores = detector.score(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, scores_csv(&data, &scores)).unwrap();
        let back = read_scores_csv(&path).unwrap();
        let aligned = align_scores(&data, &back).unwrap();
        assert_eq!(aligned, scores.iter().map(|s| s.value).collect::<Vec<_>>());
    }

    #[test]
    fn missing_score_is_a_data_error() {
        let data = Dataset::new(vec![TransactionRecord {
            id: "a".into(),
            features: vec![0.0, 1.0],
            label: Label::Licit,
        }])
        .unwrap();
        assert!(matches!(align_scores(&data, &[("b".into(), 1.0)]), Err(Error::Data(_))));
    }

    #[test]
    fn encoder_save_load_keeps_embeddings() {
        let cfg = small_config();
        let data = generate_synthetic(&cfg.synthetic_spec()).unwrap();
        let (enc, _) = train_encoder(Architecture::Abad, &data, &cfg).unwrap();
        assert!(enc.reconstruction_scale.unwrap() > 0.0);
        let dir = tempfile::tempdir().unwrap();
        enc.save(dir.path()).unwrap();
        let back = TrainedEncoder::load(dir.path()).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.embed(&data).unwrap(), enc.embed(&data).unwrap());
    }

    #[test]
    fn evaluate_rejects_single_class() {
        let data = Dataset::new(
            (0..4)
                .map(|i| TransactionRecord {
                    id: i.to_string(),
                    features: vec![i as f64, 0.0],
                    label: Label::Licit,
                })
                .collect(),
        )
        .unwrap();
        let err = evaluate_scores(&data, &[0.1, 0.2, 0.3, 0.4], ThresholdSetting::default()).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn best_threshold_never_loses_to_fixed() {
        let cfg = small_config();
        let data = generate_synthetic(&cfg.synthetic_spec()).unwrap();
        let run = run_model(Architecture::SimpleCnn, &data, &cfg).unwrap();
        let values: Vec<f64> = run.scores.iter().map(|s| s.value).collect();
        let best = evaluate_scores(&data, &values, ThresholdSetting::Best).unwrap();
        assert!(best.acc_percent >= run.evaluation.acc_percent);
        assert_eq!(best.roc, run.evaluation.roc);
    }
}

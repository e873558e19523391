//! Accuracy, ROC/AUROC and the model comparison report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::Label;
use crate::error::{Error, Result};

/// An anomaly score paired with known ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub score: f64,
    pub illicit: bool,
}

impl ScoredLabel {
    /// `None` for unlabeled records, which take no part in evaluation.
    pub fn from_label(score: f64, label: Label) -> Option<Self> {
        match label {
            Label::Illicit => Some(Self { score, illicit: true }),
            Label::Licit => Some(Self { score, illicit: false }),
            Label::Unknown => None,
        }
    }
}

/// Percentage of records whose prediction (`illicit` iff `score > threshold`) is right.
pub fn accuracy(scored: &[ScoredLabel], threshold: f64) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let correct = scored.iter().filter(|s| (s.score > threshold) == s.illicit).count();
    Ok(100.0 * correct as f64 / scored.len() as f64)
}

/// Threshold with the highest accuracy among the observed scores (and one
/// below all of them). Lowest such threshold wins ties.
pub fn best_threshold(scored: &[ScoredLabel]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("threshold selection on an empty set".into()));
    }
    let mut candidates: Vec<f64> = scored.iter().map(|s| s.score).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.insert(0, f64::NEG_INFINITY);
    let mut best = (f64::NEG_INFINITY, -1.0);
    for t in candidates {
        let acc = accuracy(scored, t)?;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Records scoring at or above this value are flagged.
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

/// JSON has no infinities: they travel as `"inf"` and `"-inf"`.
mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            x => s.serialize_f64(x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Word(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Word(w) if w == "inf" => Ok(f64::INFINITY),
            Repr::Word(w) if w == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Word(w) => Err(de::Error::custom(format!("expected a number or \"inf\", got \"{w}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auroc: f64,
    pub points: Vec<RocPoint>,
}

/// ROC curve over every distinct score and its trapezoidal area. Tied
/// scores enter together, moving the curve diagonally.
pub fn auroc(scored: &[ScoredLabel]) -> Result<Roc> {
    let pos = scored.iter().filter(|s| s.illicit).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {pos} illicit and {neg} licit"
        )));
    }
    let mut sorted: Vec<ScoredLabel> = scored.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].illicit {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        };
        area += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(Roc { auroc: area, points })
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub acc_percent: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCurves {
    pub model: String,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub curves: Vec<ModelCurves>,
    pub config: serde_json::Value,
    pub seed: u64,
}

/// Text table, CSV, and one ROC CSV per model with a non-empty curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub table: String,
    pub csv: String,
    pub roc_csv: Vec<(String, String)>,
}

pub const REPORT_CSV_HEADER: &str = "model,acc_percent,auroc";
pub const ROC_CSV_HEADER: &str = "fpr,tpr,threshold";

/// `Simple CNN, 82.5, 0.71`
pub fn render_row(row: &ReportRow) -> String {
    format!("{}, {:.1}, {:.2}", row.model, row.acc_percent, row.auroc)
}

pub fn render_report(report: &EvaluationReport) -> Result<RenderedReport> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument("report has no rows".into()));
    }
    let mut table = String::from("Model, ACC, AUROC\n");
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for row in &report.rows {
        if !(0.0..=100.0).contains(&row.acc_percent) || !(0.0..=1.0).contains(&row.auroc) {
            return Err(Error::InvalidArgument(format!("row `{}` out of range", row.model)));
        }
        table.push_str(&render_row(row));
        table.push('\n');
        let _ = writeln!(csv, "{},{:.4},{:.6}", csv_field(&row.model), row.acc_percent, row.auroc);
    }
    let roc_csv = report
        .curves
        .iter()
        .filter(|c| !c.roc.is_empty())
        .map(|c| {
            let mut s = format!("{ROC_CSV_HEADER}\n");
            for p in &c.roc {
                let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
            }
            (c.model.clone(), s)
        })
        .collect();
    Ok(RenderedReport { table, csv, roc_csv })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

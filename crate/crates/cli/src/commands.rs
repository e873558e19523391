use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aml_core::dataio::{generate_synthetic, ingest_elliptic, read_dataset_csv, write_dataset_csv, Dataset, Label};
use aml_core::metrics::{render_report, render_row, EvaluationReport, ReportRow, ROC_CSV_HEADER};
use aml_core::models::Architecture;
use aml_core::pipeline::{
    align_scores, benchmark, derive_rule_set, evaluate_scores, read_scores_csv, scores_csv, train_encoder, Detector,
    TrainedEncoder, RULES_FILE,
};
use aml_core::rules::{append_audit_log, maybe_update, RuleSet, Version};
use aml_core::{load_config, Error, Result, RunConfig, RunManifest};

use crate::args::{Cli, Command};

pub const DATASET_FILE: &str = "dataset.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const DRIFT_FILE: &str = "drift.json";
pub const AUDIT_FILE: &str = "audit.log";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// Output directory plus the manifest being assembled for it.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn start(name: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        let mut manifest = RunManifest::new(name, cfg)?;
        let config_path = cfg.write(&cfg.out_dir)?;
        manifest.add_output(&config_path);
        Ok(Self {
            dir: cfg.out_dir.clone(),
            manifest,
            started: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents)?;
        self.manifest.add_output(&path);
        Ok(path)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_input(path)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        self.manifest.write(&self.dir)?;
        log::info!("wrote {}", self.dir.display());
        Ok(())
    }
}

/// The configured dataset file, or the synthetic set the config describes.
fn load_data(cfg: &RunConfig, run: &mut Run) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => {
            let data = read_dataset_csv(path)?;
            run.input(path)?;
            log::info!("{}: {} records, d = {}", path.display(), data.len(), data.dim());
            Ok(data)
        }
        None => {
            let data = generate_synthetic(&cfg.synthetic_spec())?;
            log::info!("synthetic data: {} records, d = {}, seed {}", data.len(), data.dim(), cfg.seed);
            Ok(data)
        }
    }
}

fn load_encoder(dir: &Path, run: &mut Run) -> Result<TrainedEncoder> {
    let enc = TrainedEncoder::load(dir)?;
    for name in [aml_core::pipeline::MODEL_FILE, aml_core::pipeline::STANDARDIZER_FILE] {
        run.input(&dir.join(name))?;
    }
    Ok(enc)
}

fn load_rules(path: &Path, run: &mut Run) -> Result<RuleSet> {
    let rules = RuleSet::load(path)?;
    run.input(path)?;
    Ok(rules)
}

fn roc_csv(points: &[aml_core::metrics::RocPoint]) -> String {
    let mut s = format!("{ROC_CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}

pub fn run(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    let args = cli.command.config();
    let cfg = load_config(args.config.as_deref(), &args.overrides())?;
    let mut run = Run::start(name, &cfg)?;
    if let Some(path) = &args.config {
        run.input(path)?;
    }

    match &cli.command {
        Command::Generate { .. } => {
            let data = generate_synthetic(&cfg.synthetic_spec())?;
            let path = run.path(DATASET_FILE);
            write_dataset_csv(&data, &path)?;
            run.manifest.add_output(&path);
            println!(
                "{} records ({} illicit) -> {}",
                data.len(),
                data.count_label(Label::Illicit),
                path.display()
            );
        }
        Command::Ingest {
            features,
            classes,
            edges,
            ..
        } => {
            let ingest = ingest_elliptic(features, classes, edges.as_deref())?;
            run.input(features)?;
            run.input(classes)?;
            if let Some(e) = edges {
                run.input(e)?;
            }
            let path = run.path(DATASET_FILE);
            write_dataset_csv(&ingest.dataset, &path)?;
            run.manifest.add_output(&path);
            let d = &ingest.dataset;
            println!(
                "{} records (illicit {}, licit {}, unknown {}), d = {}, edges {}, orphan class rows {}",
                d.len(),
                d.count_label(Label::Illicit),
                d.count_label(Label::Licit),
                d.count_label(Label::Unknown),
                d.dim(),
                ingest.edge_count.map_or_else(|| "-".to_string(), |n| n.to_string()),
                ingest.orphan_class_rows
            );
        }
        Command::Train { .. } => {
            let data = load_data(&cfg, &mut run)?;
            let (encoder, curve) = train_encoder(cfg.architecture, &data, &cfg)?;
            encoder.save(&run.dir)?;
            for name in [
                aml_core::pipeline::MODEL_FILE,
                aml_core::pipeline::STANDARDIZER_FILE,
                aml_core::pipeline::ENCODER_META_FILE,
            ] {
                run.manifest.add_output(&run.path(name));
            }
            run.write(LOSS_FILE, &curve.to_csv())?;
            println!(
                "{}: {} epochs, loss {:.6} -> {:.6}",
                cfg.architecture.display_name(),
                curve.len(),
                curve.first().unwrap_or(f64::NAN),
                curve.last().unwrap_or(f64::NAN)
            );
        }
        Command::Cluster { model_dir, .. } => {
            let encoder = load_encoder(model_dir, &mut run)?;
            let data = load_data(&cfg, &mut run)?;
            let rules = derive_rule_set(&encoder, &data, &cfg, Version(0))?;
            let path = run.path(RULES_FILE);
            rules.save(&path)?;
            run.manifest.add_output(&path);
            println!("{}: {} rules", rules.version, rules.rules.len());
        }
        Command::Score { model_dir, rules, .. } => {
            let encoder = load_encoder(model_dir, &mut run)?;
            let rules_path = rules.clone().unwrap_or_else(|| model_dir.join(RULES_FILE));
            let rules = load_rules(&rules_path, &mut run)?;
            let data = load_data(&cfg, &mut run)?;
            let detector = Detector { encoder, rules };
            let scores = detector.score(&data)?;
            let flagged = scores.iter().filter(|s| !s.is_normal()).count();
            run.write(SCORES_FILE, &scores_csv(&data, &scores))?;
            println!("{flagged} of {} records flagged anomalous", scores.len());
        }
        Command::Evaluate { scores, name, .. } => {
            let data = load_data(&cfg, &mut run)?;
            let pairs = read_scores_csv(scores)?;
            run.input(scores)?;
            let values = align_scores(&data, &pairs)?;
            let eval = evaluate_scores(&data, &values, cfg.acc_threshold)?;
            let report = EvaluationReport {
                rows: vec![ReportRow {
                    model: name.clone(),
                    acc_percent: eval.acc_percent,
                    auroc: eval.roc.auroc,
                }],
                curves: Vec::new(),
                config: serde_json::to_value(&cfg)?,
                seed: cfg.seed,
            };
            let rendered = render_report(&report)?;
            run.write(EVALUATION_FILE, &rendered.csv)?;
            run.write(ROC_FILE, &roc_csv(&eval.roc.points))?;
            println!("{} (threshold {})", render_row(&report.rows[0]), eval.threshold);
        }
        Command::UpdateRules {
            model_dir,
            rules,
            audit_log,
            ..
        } => {
            let encoder = load_encoder(model_dir, &mut run)?;
            let active = load_rules(rules, &mut run)?;
            let data = load_data(&cfg, &mut run)?;
            let candidate = derive_rule_set(&encoder, &data, &cfg, Version(active.version.0 + 1))?;
            let reference = encoder.embed(&data)?;
            let refs: Vec<&[f64]> = reference.iter().map(Vec::as_slice).collect();
            let (chosen, decision, report) = maybe_update(&active, &candidate, cfg.drift_threshold, &refs)?;
            let path = run.path(RULES_FILE);
            chosen.save(&path)?;
            run.manifest.add_output(&path);
            run.write(DRIFT_FILE, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            let audit = audit_log
                .clone()
                .unwrap_or_else(|| rules.parent().unwrap_or(Path::new(".")).join(AUDIT_FILE));
            append_audit_log(&audit, &decision)?;
            println!(
                "drift {:.4} vs theta {}: {} ({} -> {})",
                decision.drift,
                decision.theta,
                if decision.adopted { "adopted" } else { "retained" },
                decision.version_from,
                decision.version_to
            );
        }
        Command::Benchmark { .. } => {
            let data = load_data(&cfg, &mut run)?;
            let outcome = benchmark(&data, &cfg, &Architecture::ALL)?;
            for r in &outcome.runs {
                run.write(&format!("loss_{}.csv", r.architecture.tag()), &r.loss.to_csv())?;
                run.write(&format!("roc_{}.csv", r.architecture.tag()), &roc_csv(&r.evaluation.roc.points))?;
            }
            write_report(&mut run, &outcome.report)?;
            run.write(REPORT_JSON, &(serde_json::to_string_pretty(&outcome.report)? + "\n"))?;
        }
        Command::Report { input, .. } => {
            let text = fs::read_to_string(input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
            let report: EvaluationReport = serde_json::from_str(&text)?;
            run.input(input)?;
            write_report(&mut run, &report)?;
        }
    }
    run.finish()
}

fn write_report(run: &mut Run, report: &EvaluationReport) -> Result<()> {
    let rendered = render_report(report)?;
    run.write(REPORT_CSV, &rendered.csv)?;
    run.write(REPORT_TXT, &rendered.table)?;
    print!("{}", rendered.table);
    Ok(())
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

#[derive(Debug, Parser)]
#[command(name = "aml", version, about = "Contrastive anomaly detection for transaction data")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Convert Elliptic-layout files into the flat dataset CSV.
    Ingest {
        /// Features file (`txId,f1,...`, no header).
        #[arg(long)]
        features: PathBuf,
        /// Classes file (`txId,class`).
        #[arg(long)]
        classes: PathBuf,
        /// Optional edge list; only counted.
        #[arg(long)]
        edges: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one encoder with the contrastive objective.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cluster embeddings into the initial rule set.
    Cluster {
        /// Directory holding a trained encoder.
        #[arg(long)]
        model_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score records against a rule set.
    Score {
        #[arg(long)]
        model_dir: PathBuf,
        /// Rule set JSON; defaults to `rules.json` in the model directory.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Accuracy and AUROC of a scores file against the dataset labels.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Row name in the report.
        #[arg(long, default_value = "model")]
        name: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-cluster on new data and adopt the result if drift exceeds the threshold.
    UpdateRules {
        #[arg(long)]
        model_dir: PathBuf,
        /// Active rule set.
        #[arg(long)]
        rules: PathBuf,
        /// Audit log to append to; defaults to `audit.log` next to the active rules.
        #[arg(long)]
        audit_log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train and evaluate all six models on one dataset.
    Benchmark {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-render a saved benchmark report.
    Report {
        /// `report.json` written by `benchmark`.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Ingest { .. } => "ingest",
            Command::Train { .. } => "train",
            Command::Cluster { .. } => "cluster",
            Command::Score { .. } => "score",
            Command::Evaluate { .. } => "evaluate",
            Command::UpdateRules { .. } => "update-rules",
            Command::Benchmark { .. } => "benchmark",
            Command::Report { .. } => "report",
        }
    }

    pub fn config(&self) -> &ConfigArgs {
        match self {
            Command::Generate { config }
            | Command::Ingest { config, .. }
            | Command::Train { config }
            | Command::Cluster { config, .. }
            | Command::Score { config, .. }
            | Command::Evaluate { config, .. }
            | Command::UpdateRules { config, .. }
            | Command::Benchmark { config }
            | Command::Report { config, .. } => config,
        }
    }
}

/// Config file plus one override flag per configuration key.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    anomaly_fraction: Option<String>,
    #[arg(long)]
    clusters: Option<String>,
    #[arg(long)]
    anomaly_offset: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    architecture: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    negatives: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    anchors_per_epoch: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    abad_objective: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    percentile: Option<String>,
    /// Number or `auto`.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    min_pts: Option<String>,
    #[arg(long)]
    radius_percentile: Option<String>,
    #[arg(long)]
    drift_threshold: Option<String>,
    /// Number or `best`.
    #[arg(long)]
    acc_threshold: Option<String>,
    /// Dataset CSV; synthetic data from the config when absent.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
}

/// Keys whose values are always strings.
const TEXT_KEYS: [&str; 5] = ["architecture", "optimizer", "abad_objective", "data", "out_dir"];

fn flag_value(key: &str, raw: &str) -> Value {
    if TEXT_KEYS.contains(&key) {
        return Value::String(raw.to_string());
    }
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_))) => v,
        _ => Value::String(raw.to_string()),
    }
}

impl ConfigArgs {
    /// Flag values keyed by their configuration names.
    pub fn overrides(&self) -> Map<String, Value> {
        let pairs: [(&str, &Option<String>); 25] = [
            ("seed", &self.seed),
            ("count", &self.count),
            ("anomaly_fraction", &self.anomaly_fraction),
            ("clusters", &self.clusters),
            ("anomaly_offset", &self.anomaly_offset),
            ("dim", &self.dim),
            ("architecture", &self.architecture),
            ("embed_dim", &self.embed_dim),
            ("temperature", &self.temperature),
            ("negatives", &self.negatives),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("anchors_per_epoch", &self.anchors_per_epoch),
            ("learning_rate", &self.learning_rate),
            ("optimizer", &self.optimizer),
            ("abad_objective", &self.abad_objective),
            ("k", &self.k),
            ("percentile", &self.percentile),
            ("eps", &self.eps),
            ("min_pts", &self.min_pts),
            ("radius_percentile", &self.radius_percentile),
            ("drift_threshold", &self.drift_threshold),
            ("acc_threshold", &self.acc_threshold),
            ("data", &self.data),
            ("out_dir", &self.out_dir),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|raw| (k.to_string(), flag_value(k, raw))))
            .collect()
    }
}

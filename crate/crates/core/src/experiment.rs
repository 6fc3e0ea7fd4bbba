//! Experiment orchestration: configs, replicate runs, summaries and the
//! results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{Checkpoint, FArch, Model, ModelSpec, NetError, RhoArch};
use crate::pooling::{PoolingSpec, Strategy};
use crate::seed;
use crate::tasks::{self, Metrics, TaskDataset, TaskError, TaskName, TaskSpec};
use crate::training::{self, TrainConfig, TrainError, TrainReport, TrainSetup};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("bad glob pattern: {0}")]
    Pattern(#[from] glob::PatternError),
    #[error("no reports match {0}")]
    NoReports(String),
    #[error("report {path} does not match its config: {msg}")]
    Integrity { path: PathBuf, msg: String },
}

impl ExperimentError {
    /// Whether the failure comes from the user's configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Json { .. })
            || matches!(self, ExperimentError::Train(TrainError::Config(_)))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub pooling: PoolingSpec,
    pub train: TrainConfig,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Master seed. The dataset, and per replicate the weights, the
    /// permutation stream and the shuffling order, are derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Load the dataset from here instead of generating it.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

/// Desk-scale epoch counts: 300 with a linear head, 500 with an MLP head.
pub fn desk_epochs(rho: RhoArch) -> usize {
    match rho {
        RhoArch::Linear => 300,
        RhoArch::Mlp100 => 500,
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for one cell of the results grid: 20,000/2,000
    /// examples, three replicates.
    pub fn desk(task: TaskName, model: ModelSpec, pooling: PoolingSpec, seed: u64) -> Self {
        let epochs = desk_epochs(model.rho_arch);
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            task: TaskSpec::desk(task, 0),
            model,
            pooling,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            replicates: 3,
            output_dir: None,
            seed,
            data_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("malformed config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.replicates == 0 {
            return Err("replicates must be at least 1".into());
        }
        self.task.validate()?;
        self.model.validate()?;
        self.pooling.validate()?;
        self.train.validate()?;
        if self.model.vocab != self.task.vocab {
            return Err(format!(
                "model vocab {} differs from task vocab {}",
                self.model.vocab, self.task.vocab
            ));
        }
        let recurrent = self.model.f_arch.is_recurrent();
        match self.pooling.strategy {
            Strategy::Kary => {
                if recurrent || self.model.k != self.pooling.k {
                    return Err(format!(
                        "k-ary pooling needs an MLP f with matching k (pooling k = {:?}, model k = {:?})",
                        self.pooling.k, self.model.k
                    ));
                }
            }
            Strategy::Exact | Strategy::Canonical => {
                if let Some(k) = self.model.k {
                    if k > self.task.seq_len {
                        return Err(format!("model arity {k} exceeds sequence length {}", self.task.seq_len));
                    }
                }
            }
            Strategy::Sampled => {
                if let Some(k) = self.model.k {
                    if k > self.task.seq_len {
                        return Err(format!("model arity {k} exceeds sequence length {}", self.task.seq_len));
                    }
                }
            }
        }
        if self.pooling.strategy == Strategy::Exact && self.task.seq_len > crate::perm::DEFAULT_ENUMERATION_CAP {
            return Err(format!(
                "exact pooling over {} elements exceeds the enumeration cap of {}; use sampled pooling",
                self.task.seq_len,
                crate::perm::DEFAULT_ENUMERATION_CAP
            ));
        }
        Ok(())
    }

    /// The config with every seed resolved for replicate `r`.
    pub fn resolved(&self, r: usize) -> ExperimentConfig {
        let mut c = self.clone();
        c.replicates = 1;
        c.task.seed = seed::derive(self.seed, seed::stream::DATA, 0);
        c.pooling.seed = seed::derive(self.seed, seed::stream::PERM, r as u64);
        c.train.seed = seed::derive(self.seed, seed::stream::SHUFFLE, r as u64);
        c
    }

    pub fn init_seed(&self, r: usize) -> u64 {
        seed::derive(self.seed, seed::stream::INIT, r as u64)
    }
}

/// One replicate's outcome together with the resolved config that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub replicate: usize,
    pub report: TrainReport,
}

impl RunReport {
    /// Checks the report against its config echo.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let c = &self.config;
        let r = &self.report;
        if r.model != c.model {
            return Err("model spec differs".into());
        }
        if r.pooling != c.pooling {
            return Err("pooling spec differs".into());
        }
        if r.train != c.train {
            return Err("training config differs".into());
        }
        if r.epochs.len() != c.train.epochs {
            return Err(format!(
                "{} epochs recorded, {} configured",
                r.epochs.len(),
                c.train.epochs
            ));
        }
        if r.epochs.iter().enumerate().any(|(i, e)| e.epoch != i + 1) {
            return Err("epoch numbering is not contiguous".into());
        }
        if r.final_test.infer_samples != c.pooling.infer_samples {
            return Err("inference sample count differs".into());
        }
        c.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let report: RunReport = serde_json::from_str(&text).map_err(json_err(path))?;
        report.validate().map_err(|msg| ExperimentError::Integrity {
            path: path.to_path_buf(),
            msg,
        })?;
        Ok(report)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: MeanStd,
    pub rmse: MeanStd,
    pub mae: MeanStd,
}

impl MetricSummary {
    fn of(metrics: &[Metrics]) -> Self {
        let col = |f: fn(&Metrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
        MetricSummary {
            accuracy: col(|m| m.accuracy),
            rmse: col(|m| m.rmse),
            mae: col(|m| m.mae),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub replicates: usize,
    pub single: MetricSummary,
    pub averaged: MetricSummary,
    pub infer_samples: usize,
}

impl Summary {
    pub fn of(reports: &[RunReport]) -> Self {
        let single: Vec<Metrics> = reports.iter().map(|r| r.report.final_test.single).collect();
        let averaged: Vec<Metrics> = reports.iter().map(|r| r.report.final_test.averaged).collect();
        Summary {
            replicates: reports.len(),
            single: MetricSummary::of(&single),
            averaged: MetricSummary::of(&averaged),
            infer_samples: reports.first().map_or(1, |r| r.report.final_test.infer_samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub reports: Vec<RunReport>,
    pub summary: Summary,
}

impl RunOutcome {
    /// Reports with wall-clock fields zeroed.
    pub fn without_timing(&self) -> RunOutcome {
        let mut o = self.clone();
        for r in &mut o.reports {
            r.report = r.report.without_timing();
        }
        o
    }
}

/// Generated or loaded dataset for the config.
pub fn dataset(config: &ExperimentConfig) -> Result<TaskDataset> {
    let spec = config.resolved(0).task;
    match &config.data_dir {
        Some(dir) => {
            let data = TaskDataset::load(dir)?;
            if data.spec.name != spec.name || data.spec.seq_len != spec.seq_len || data.spec.vocab != spec.vocab {
                return Err(ExperimentError::Config(format!(
                    "dataset in {} is for {} (length {}, vocab {}), config wants {} (length {}, vocab {})",
                    dir.display(),
                    data.spec.name,
                    data.spec.seq_len,
                    data.spec.vocab,
                    spec.name,
                    spec.seq_len,
                    spec.vocab
                )));
            }
            Ok(data)
        }
        None => Ok(tasks::generate(&spec)),
    }
}

/// Runs every replicate, writing artifacts under `output_dir` when set.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    run_with_progress(config, |_, _| {})
}

/// [`run`] with a callback after each replicate.
pub fn run_with_progress(config: &ExperimentConfig, mut progress: impl FnMut(usize, &RunReport)) -> Result<RunOutcome> {
    config.validate().map_err(ExperimentError::Config)?;
    let data = dataset(config)?;
    let mut reports = Vec::with_capacity(config.replicates);
    for r in 0..config.replicates {
        let resolved = config.resolved(r);
        let model = Model::new(config.model.clone(), config.init_seed(r))?;
        let (trained, report) = training::train(TrainSetup {
            model,
            pooling: &resolved.pooling,
            config: &resolved.train,
            train: &data.train,
            test: &data.test,
            metric: config.task.name.primary_metric(),
        })?;
        let run = RunReport {
            config: resolved,
            replicate: r,
            report,
        };
        if let Some(dir) = &config.output_dir {
            write_replicate(dir, &run, &trained)?;
        }
        progress(r, &run);
        reports.push(run);
    }
    let summary = Summary::of(&reports);
    if let Some(dir) = &config.output_dir {
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).map_err(json_err(&path))?;
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(RunOutcome { reports, summary })
}

fn write_replicate(dir: &Path, run: &RunReport, model: &Model) -> Result<()> {
    let sub = dir.join(format!("replicate_{:02}", run.replicate));
    fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    run.save(&sub.join("report.json"))?;
    let csv = sub.join("metrics.csv");
    fs::write(&csv, run.report.metrics_csv()).map_err(io_err(&csv))?;
    Checkpoint::from_model(model).save(&sub.join("checkpoint.json"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Row key: f architecture, method, inference samples, arity, head.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct RowKey {
    f: String,
    method: String,
    infer: String,
    k: String,
    rho: String,
}

fn method_label(strategy: Strategy) -> &'static str {
    match strategy {
        Strategy::Exact | Strategy::Kary => "exact",
        Strategy::Sampled => "pi-SGD",
        Strategy::Canonical => "canonical",
    }
}

fn f_label(spec: &ModelSpec) -> &'static str {
    match spec.f_arch {
        FArch::Mlp30 => "MLP",
        FArch::Lstm50 => "LSTM",
        FArch::Gru80 => "GRU",
    }
}

/// Aggregates reports into a results table: one row per
/// `(f, method, inference samples, k, rho)`, one column per task, cells
/// `mean(std)` of the task's primary metric over replicates. Sampled
/// models contribute a one-sample row and an averaged row.
pub fn report_table(pattern: &str, format: TableFormat) -> Result<String> {
    let mut reports = Vec::new();
    for entry in glob::glob(pattern)? {
        let path = entry.map_err(|e| ExperimentError::Io {
            path: e.path().to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
        reports.push(RunReport::load(&path)?);
    }
    if reports.is_empty() {
        return Err(ExperimentError::NoReports(pattern.to_string()));
    }
    Ok(format_table(&reports, format))
}

pub fn format_table(reports: &[RunReport], format: TableFormat) -> String {
    let mut cells: BTreeMap<RowKey, BTreeMap<TaskName, Vec<f64>>> = BTreeMap::new();
    for run in reports {
        let c = &run.config;
        let metric = c.task.name.primary_metric();
        let k = c.model.k.map_or("|h|".to_string(), |k| k.to_string());
        let base = RowKey {
            f: f_label(&c.model).to_string(),
            method: method_label(c.pooling.strategy).to_string(),
            infer: "-".to_string(),
            k,
            rho: c.model.rho_arch.label().to_string(),
        };
        let fin = &run.report.final_test;
        let mut rows = vec![(base.clone(), fin.single.get(metric))];
        if c.pooling.strategy == Strategy::Sampled {
            rows[0].0.infer = "1".to_string();
            if fin.infer_samples > 1 {
                let mut avg = base;
                avg.infer = fin.infer_samples.to_string();
                rows.push((avg, fin.averaged.get(metric)));
            }
        }
        for (key, value) in rows {
            cells
                .entry(key)
                .or_default()
                .entry(c.task.name)
                .or_default()
                .push(value);
        }
    }
    let tasks: Vec<TaskName> = TaskName::ALL
        .into_iter()
        .filter(|t| cells.values().any(|row| row.contains_key(t)))
        .collect();
    let header: Vec<String> = ["f", "method", "infer_samples", "k", "rho"]
        .into_iter()
        .map(String::from)
        .chain(tasks.iter().map(|t| t.as_str().to_string()))
        .collect();
    let body: Vec<Vec<String>> = cells
        .iter()
        .map(|(key, row)| {
            let mut line = vec![
                key.f.clone(),
                key.method.clone(),
                key.infer.clone(),
                key.k.clone(),
                key.rho.clone(),
            ];
            for t in &tasks {
                line.push(match row.get(t) {
                    Some(v) => {
                        let (m, s) = mean_std(v);
                        format!("{m:.4}({s:.4})")
                    }
                    None => String::new(),
                });
            }
            line
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for line in std::iter::once(&header).chain(&body) {
                let _ = writeln!(out, "{}", line.join(","));
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for line in &body {
                let _ = writeln!(out, "| {} |", line.join(" | "));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(strategy: &str) -> ExperimentConfig {
        let (model, pooling) = match strategy {
            "kary" => (ModelSpec::kary(10, 2, RhoArch::Linear), PoolingSpec::kary(2)),
            _ => (
                ModelSpec::full(10, FArch::Gru80, RhoArch::Linear),
                PoolingSpec::sampled(1, 3),
            ),
        };
        let mut c = ExperimentConfig::desk(TaskName::Sum, model, pooling, 11);
        c.task = TaskSpec::standard(TaskName::Sum, 0).with_sizes(40, 10);
        c.task.vocab = 10;
        c.task.seq_len = 3;
        c.train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        }
        .with_lr(0.01);
        c.replicates = 2;
        c
    }

    #[test]
    fn mean_std_conventions() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validation_names_the_constraint() {
        let mut c = tiny("kary");
        assert!(c.validate().is_ok());
        c.pooling.k = Some(3);
        assert!(c.validate().unwrap_err().contains("matching k"));
        let mut c = tiny("sampled");
        c.schema_version = 9;
        assert!(c.validate().unwrap_err().contains("schema_version"));
        let mut c = tiny("kary");
        c.model.vocab = 7;
        assert!(c.validate().unwrap_err().contains("vocab"));
    }

    #[test]
    fn replicates_get_distinct_seeds_and_shared_data() {
        let c = tiny("sampled");
        let (a, b) = (c.resolved(0), c.resolved(1));
        assert_eq!(a.task.seed, b.task.seed);
        assert_ne!(a.pooling.seed, b.pooling.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(c.init_seed(0), c.init_seed(1));
    }

    #[test]
    fn run_writes_artifacts_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny("sampled");
        c.output_dir = Some(dir.path().to_path_buf());
        let out = run(&c).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.summary.replicates, 2);
        let path = dir.path().join("replicate_01/report.json");
        let back = RunReport::load(&path).unwrap();
        assert_eq!(back, out.reports[1]);
        let csv = fs::read_to_string(dir.path().join("replicate_00/metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let pattern = format!("{}/*/report.json", dir.path().display());
        let table = report_table(&pattern, TableFormat::Csv).unwrap();
        // header, one-sample row, averaged row
        assert_eq!(table.lines().count(), 3, "{table}");
        assert!(table.starts_with("f,method,infer_samples,k,rho,sum"));
    }

    #[test]
    fn tampered_report_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny("kary");
        let mut out = run(&ExperimentConfig { replicates: 1, ..c }).unwrap();
        out.reports[0].report.epochs.pop();
        let path = dir.path().join("r.json");
        out.reports[0].save(&path).unwrap();
        assert!(matches!(RunReport::load(&path), Err(ExperimentError::Integrity { .. })));
    }

    #[test]
    fn single_replicate_has_zero_std() {
        let out = run(&ExperimentConfig {
            replicates: 1,
            ..tiny("kary")
        })
        .unwrap();
        assert_eq!(out.summary.single.accuracy.std, 0.0);
        let table = format_table(&out.reports, TableFormat::Markdown);
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn empty_glob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let pattern = format!("{}/*.json", dir.path().display());
        assert!(matches!(
            report_table(&pattern, TableFormat::Csv),
            Err(ExperimentError::NoReports(_))
        ));
    }
}

//! The five arithmetic set tasks: generators, target functions, metrics and
//! the CSV dataset format.
//!
//! CSV layout: header `digits,target`, one row per example, digits separated
//! by single spaces.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task {0:?} (expected sum, range, unique_sum, unique_count or variance)")]
    UnknownTask(String),
    #[error("predictions ({0}) and targets ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("metrics need at least one example")]
    Empty,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Sum,
    Range,
    UniqueSum,
    UniqueCount,
    Variance,
}

impl TaskName {
    pub const ALL: [TaskName; 5] = [
        TaskName::Sum,
        TaskName::Range,
        TaskName::UniqueSum,
        TaskName::UniqueCount,
        TaskName::Variance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Sum => "sum",
            TaskName::Range => "range",
            TaskName::UniqueSum => "unique_sum",
            TaskName::UniqueCount => "unique_count",
            TaskName::Variance => "variance",
        }
    }

    /// Standard `(seq_len, vocab)` of the task.
    pub fn standard_shape(self) -> (usize, usize) {
        match self {
            TaskName::Sum | TaskName::Range => (5, 100),
            TaskName::UniqueSum | TaskName::UniqueCount => (10, 10),
            TaskName::Variance => (10, 100),
        }
    }

    /// Variance is scored by RMSE, everything else by accuracy.
    pub fn primary_metric(self) -> MetricKind {
        match self {
            TaskName::Variance => MetricKind::Rmse,
            _ => MetricKind::Accuracy,
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s.replace('-', "_"))
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub seq_len: usize,
    pub vocab: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Full sizes: 100,000 training and 10,000 test examples.
    pub fn standard(name: TaskName, seed: u64) -> Self {
        let (seq_len, vocab) = name.standard_shape();
        TaskSpec {
            name,
            seq_len,
            vocab,
            n_train: 100_000,
            n_test: 10_000,
            seed,
        }
    }

    /// Single-core scale: 20,000 training and 2,000 test examples.
    pub fn desk(name: TaskName, seed: u64) -> Self {
        TaskSpec {
            n_train: 20_000,
            n_test: 2_000,
            ..TaskSpec::standard(name, seed)
        }
    }

    pub fn with_sizes(mut self, n_train: usize, n_test: usize) -> Self {
        self.n_train = n_train;
        self.n_test = n_test;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.seq_len == 0 {
            return Err("seq_len must be positive".into());
        }
        if self.vocab == 0 {
            return Err("vocab must be positive".into());
        }
        Ok(())
    }
}

/// Integer sequences with real targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Split, Split) {
        let n = n.min(self.len());
        (
            Split {
                inputs: self.inputs[..n].to_vec(),
                targets: self.targets[..n].to_vec(),
            },
            Split {
                inputs: self.inputs[n..].to_vec(),
                targets: self.targets[n..].to_vec(),
            },
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("digits,target\n");
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let digits: Vec<String> = x.iter().map(usize::to_string).collect();
            out.push_str(&digits.join(" "));
            out.push(',');
            out.push_str(&y.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Split> {
        let text = fs::read_to_string(path)?;
        let err = |line: usize, msg: String| TaskError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut split = Split {
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("digits") {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (digits, target) = line
                .rsplit_once(',')
                .ok_or_else(|| err(i + 1, "expected `digits,target`".into()))?;
            let x = digits
                .split_whitespace()
                .map(|d| d.parse::<usize>().map_err(|e| err(i + 1, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let y = target.trim().parse::<f64>().map_err(|e| err(i + 1, e.to_string()))?;
            split.inputs.push(x);
            split.targets.push(y);
        }
        Ok(split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Split,
    pub test: Split,
}

impl TaskDataset {
    /// Re-checks every digit range and target.
    pub fn verify(&self) -> std::result::Result<(), String> {
        for (which, split) in [("train", &self.train), ("test", &self.test)] {
            for (i, (x, &y)) in split.inputs.iter().zip(&split.targets).enumerate() {
                if x.len() != self.spec.seq_len || x.iter().any(|&d| d >= self.spec.vocab) {
                    return Err(format!("{which}[{i}]: malformed input {x:?}"));
                }
                if target_fn(self.spec.name, x) != y {
                    return Err(format!("{which}[{i}]: target {y} does not match {x:?}"));
                }
            }
        }
        Ok(())
    }

    /// Writes `train.csv`, `test.csv` and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.train.write_csv(&dir.join("train.csv"))?;
        self.test.write_csv(&dir.join("test.csv"))?;
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: TaskSpec = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        Ok(TaskDataset {
            spec,
            train: Split::read_csv(&dir.join("train.csv"))?,
            test: Split::read_csv(&dir.join("test.csv"))?,
        })
    }
}

/// I.i.d. uniform digits with replacement; the training split is drawn
/// first, then the test split, from one seeded stream.
pub fn generate(spec: &TaskSpec) -> TaskDataset {
    let mut rng = seed::rng(spec.seed);
    let mut draw = |n: usize| {
        let inputs: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..spec.seq_len).map(|_| rng.random_range(0..spec.vocab)).collect())
            .collect();
        let targets = inputs.iter().map(|x| target_fn(spec.name, x)).collect();
        Split { inputs, targets }
    };
    let train = draw(spec.n_train);
    let test = draw(spec.n_test);
    TaskDataset {
        spec: spec.clone(),
        train,
        test,
    }
}

/// The (permutation-invariant) quantity each task predicts.
pub fn target_fn(name: TaskName, x: &[usize]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    match name {
        TaskName::Sum => x.iter().sum::<usize>() as f64,
        TaskName::Range => (x.iter().max().unwrap() - x.iter().min().unwrap()) as f64,
        TaskName::UniqueSum => x.iter().collect::<BTreeSet<_>>().into_iter().sum::<usize>() as f64,
        TaskName::UniqueCount => x.iter().collect::<BTreeSet<_>>().len() as f64,
        TaskName::Variance => {
            // (n * sum x^2 - (sum x)^2) / n^2 in integers, so every ordering
            // gives the same bits
            let n = x.len() as u128;
            let s: u128 = x.iter().map(|&v| v as u128).sum();
            let s2: u128 = x.iter().map(|&v| (v as u128).pow(2)).sum();
            (n * s2 - s * s) as f64 / (n * n) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Rmse,
    Mae,
}

/// Fraction of predictions that round (half away from zero) to the target.
pub fn accuracy(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.round() == **t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / targets.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / targets.len() as f64)
}

pub fn metric(kind: MetricKind, predictions: &[f64], targets: &[f64]) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => accuracy(predictions, targets),
        MetricKind::Rmse => rmse(predictions, targets),
        MetricKind::Mae => mae(predictions, targets),
    }
}

fn check_lengths(p: &[f64], t: &[f64]) -> Result<()> {
    if p.len() != t.len() {
        return Err(TaskError::LengthMismatch(p.len(), t.len()));
    }
    if t.is_empty() {
        return Err(TaskError::Empty);
    }
    Ok(())
}

/// All three metrics at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub rmse: f64,
    pub mae: f64,
}

impl Metrics {
    pub fn compute(predictions: &[f64], targets: &[f64]) -> Result<Self> {
        Ok(Metrics {
            accuracy: accuracy(predictions, targets)?,
            rmse: rmse(predictions, targets)?,
            mae: mae(predictions, targets)?,
        })
    }

    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Accuracy => self.accuracy,
            MetricKind::Rmse => self.rmse,
            MetricKind::Mae => self.mae,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let s = TaskSpec::standard(TaskName::Sum, 0);
        assert_eq!((s.seq_len, s.vocab, s.n_train, s.n_test), (5, 100, 100_000, 10_000));
        let u = TaskSpec::standard(TaskName::UniqueCount, 0);
        assert_eq!((u.seq_len, u.vocab), (10, 10));
        let v = TaskSpec::standard(TaskName::Variance, 0);
        assert_eq!((v.seq_len, v.vocab), (10, 100));
    }

    #[test]
    fn targets() {
        assert_eq!(target_fn(TaskName::Sum, &[1, 2, 3, 4, 5]), 15.0);
        assert_eq!(target_fn(TaskName::Range, &[10, 3, 7, 3, 9]), 7.0);
        assert_eq!(target_fn(TaskName::UniqueSum, &[2, 2, 5, 7]), 14.0);
        assert_eq!(target_fn(TaskName::UniqueCount, &[2, 2, 5, 7]), 3.0);
        assert_eq!(target_fn(TaskName::Variance, &[1, 3]), 1.0);
    }

    #[test]
    fn metrics() {
        let t = [3.0, 7.0, 10.0];
        let m = Metrics::compute(&t, &t).unwrap();
        assert_eq!((m.accuracy, m.rmse, m.mae), (1.0, 0.0, 0.0));
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.4).collect();
        assert_eq!(accuracy(&shifted, &t).unwrap(), 1.0);
        assert!((mae(&shifted, &t).unwrap() - 0.4).abs() < 1e-12);
        let off: Vec<f64> = t.iter().map(|v| v + 3.0).collect();
        assert_eq!(rmse(&off, &t).unwrap(), 3.0);
        assert!(matches!(accuracy(&t[..2], &t), Err(TaskError::LengthMismatch(2, 3))));
        assert!(matches!(rmse(&[], &[]), Err(TaskError::Empty)));
    }

    #[test]
    fn half_rounds_away_from_zero() {
        assert_eq!(accuracy(&[2.5], &[3.0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[-0.5], &[-1.0]).unwrap(), 1.0);
    }

    #[test]
    fn generation_is_seeded_and_consistent() {
        let spec = TaskSpec::standard(TaskName::UniqueSum, 12).with_sizes(300, 50);
        let a = generate(&spec);
        assert_eq!(a, generate(&spec));
        assert_eq!((a.train.len(), a.test.len()), (300, 50));
        a.verify().unwrap();
        let other = generate(&TaskSpec { seed: 13, ..spec });
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn csv_roundtrip() {
        let spec = TaskSpec::standard(TaskName::Variance, 3).with_sizes(40, 10);
        let data = generate(&spec);
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        let back = TaskDataset::load(dir.path()).unwrap();
        assert_eq!(back, data);
        let first_row = fs::read_to_string(dir.path().join("train.csv")).unwrap();
        let row = first_row.lines().nth(1).unwrap();
        assert_eq!(row.split(',').next().unwrap().split(' ').count(), 10);
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("unique-count".parse::<TaskName>().unwrap(), TaskName::UniqueCount);
        assert!("median".parse::<TaskName>().is_err());
    }
}

//! Scoring, cross-seed aggregation, per-relation breakdowns and report files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prompting::PredictionMethod;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to score")]
    Empty,
    #[error("report invariant violated: {0}")]
    Invariant(String),
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("records file: {0}")]
    Csv(#[from] csv::Error),
}

/// One scored query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub base_seed: u64,
    pub episode_index: usize,
    pub episode_seed: u64,
    pub query_uid: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub method: PredictionMethod,
    pub prompt_digest: String,
    pub raw_completion: String,
}

impl EvalRecord {
    /// Unparsed output never counts, whatever `predicted` holds.
    pub fn is_correct(&self) -> bool {
        self.method != PredictionMethod::Unparsed && self.predicted.as_deref() == Some(self.gold.as_str())
    }
}

pub fn score(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Mean and sample (n − 1) standard deviation; the deviation of a single value is 0.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn per_relation_counts(records: &[EvalRecord]) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for r in records {
        let t = out.entry(r.gold.clone()).or_default();
        t.total += 1;
        t.correct += usize::from(r.is_correct());
    }
    out
}

/// Pooled accuracy per gold label; labels without records are absent.
pub fn per_relation_breakdown(records: &[EvalRecord]) -> BTreeMap<String, f64> {
    per_relation_counts(records)
        .into_iter()
        .map(|(k, t)| (k, t.accuracy()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub base_seed: u64,
    pub accuracy: f64,
    pub queries: usize,
    pub correct: usize,
    pub unparsed: usize,
}

/// Number of demonstrations per prompt over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoCountSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl DemoCountSummary {
    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        let min = *counts.iter().min()?;
        let max = *counts.iter().max()?;
        Some(Self {
            min,
            max,
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Run settings as given.
    pub config: serde_json::Value,
    /// Pooled over every record of every seed.
    pub accuracy: f64,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub std_denominator: String,
    pub per_relation: BTreeMap<String, f64>,
    pub per_relation_counts: BTreeMap<String, Tally>,
    pub per_relation_pooling: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demonstrations: Option<DemoCountSummary>,
    pub records_path: String,
}

impl RunReport {
    /// Builds and checks a report from all records of a run.
    pub fn build(
        config: serde_json::Value,
        seeds: &[u64],
        records: &[EvalRecord],
        demo_counts: &[usize],
        records_path: impl Into<String>,
    ) -> Result<Self, EvalError> {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let rs: Vec<EvalRecord> = records.iter().filter(|r| r.base_seed == seed).cloned().collect();
            per_seed.push(SeedResult {
                base_seed: seed,
                accuracy: score(&rs)?,
                queries: rs.len(),
                correct: rs.iter().filter(|r| r.is_correct()).count(),
                unparsed: rs.iter().filter(|r| r.method == PredictionMethod::Unparsed).count(),
            });
        }
        let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
        let (mean, std) = aggregate(&accs)?;
        let report = Self {
            config,
            accuracy: score(records)?,
            per_seed,
            mean,
            std,
            std_denominator: "n-1".into(),
            per_relation: per_relation_breakdown(records),
            per_relation_counts: per_relation_counts(records),
            per_relation_pooling: "records".into(),
            demonstrations: DemoCountSummary::from_counts(demo_counts),
            records_path: records_path.into(),
        };
        report.check()?;
        Ok(report)
    }

    pub fn check(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Invariant(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.accuracy) || self.per_seed.iter().any(|s| !unit(s.accuracy)) {
            return bad("accuracy outside [0, 1]".into());
        }
        let lo = self.per_seed.iter().map(|s| s.accuracy).fold(f64::INFINITY, f64::min);
        let hi = self.per_seed.iter().map(|s| s.accuracy).fold(f64::NEG_INFINITY, f64::max);
        if self.mean < lo - 1e-12 || self.mean > hi + 1e-12 {
            return bad(format!("mean {} outside [{lo}, {hi}]", self.mean));
        }
        let total: usize = self.per_relation_counts.values().map(|t| t.total).sum();
        let weighted: f64 = self
            .per_relation_counts
            .iter()
            .map(|(k, t)| self.per_relation[k] * t.total as f64)
            .sum::<f64>()
            / total as f64;
        if (weighted - self.accuracy).abs() > 1e-12 {
            return bad(format!("per-relation accuracies re-aggregate to {weighted}, not {}", self.accuracy));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        self.check()?;
        std::fs::write(path, self.to_json()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    base_seed: u64,
    episode_index: usize,
    episode_seed: u64,
    query_uid: String,
    gold: String,
    predicted: String,
    method: PredictionMethod,
    correct: bool,
    prompt_digest: String,
    raw_completion: String,
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRow {
            base_seed: r.base_seed,
            episode_index: r.episode_index,
            episode_seed: r.episode_seed,
            query_uid: r.query_uid.clone(),
            gold: r.gold.clone(),
            predicted: r.predicted.clone().unwrap_or_default(),
            method: r.method,
            correct: r.is_correct(),
            prompt_digest: r.prompt_digest.clone(),
            raw_completion: r.raw_completion.clone(),
        })?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(EvalRecord {
                base_seed: row.base_seed,
                episode_index: row.episode_index,
                episode_seed: row.episode_seed,
                query_uid: row.query_uid,
                gold: row.gold,
                predicted: (!row.predicted.is_empty()).then_some(row.predicted),
                method: row.method,
                prompt_digest: row.prompt_digest,
                raw_completion: row.raw_completion,
            })
        })
        .collect()
}

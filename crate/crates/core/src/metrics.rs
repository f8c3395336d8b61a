//! State-recognition and injection-regression metrics, macro averaging and
//! cross-validation summaries.
//!
//! Undefined ratios (no positives predicted, none present) are reported as 0.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability above which a sigmoid output counts as ON.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Thresholds probabilities at [`DECISION_THRESHOLD`] (strictly above is ON).
pub fn binarize(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > DECISION_THRESHOLD)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let total = c.total();
    let accuracy = if total == 0 { 1.0 } else { ratio(c.tp + c.tn, total) };
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassificationMetrics {
        accuracy,
        recall,
        precision,
        f1,
    }
}

/// Unweighted mean of each metric across appliances.
pub fn macro_average(per_appliance: &[ClassificationMetrics]) -> Result<ClassificationMetrics> {
    if per_appliance.is_empty() {
        return Err(Error::EmptyInput("macro_average"));
    }
    let n = per_appliance.len() as f64;
    let sum = |f: fn(&ClassificationMetrics) -> f64| per_appliance.iter().map(f).sum::<f64>() / n;
    Ok(ClassificationMetrics {
        accuracy: sum(|m| m.accuracy),
        recall: sum(|m| m.recall),
        precision: sum(|m| m.precision),
        f1: sum(|m| m.f1),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
}

impl RegressionMetrics {
    pub fn scaled(&self, factor: f64) -> Self {
        RegressionMetrics {
            rmse: self.rmse * factor,
            mae: self.mae * factor,
        }
    }
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("regression_metrics"));
    }
    let n = pred.len() as f64;
    let (sq, abs) = pred
        .iter()
        .zip(truth)
        .fold((0.0, 0.0), |(sq, abs), (p, t)| {
            let d = p - t;
            (sq + d * d, abs + d.abs())
        });
    Ok(RegressionMetrics {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
    })
}

/// Per-fold values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_cv(fold_values: &[f64]) -> Result<CvSummary> {
    if fold_values.is_empty() {
        return Err(Error::EmptyInput("aggregate_cv"));
    }
    let n = fold_values.len() as f64;
    let mean = fold_values.iter().sum::<f64>() / n;
    let std = if fold_values.len() == 1 {
        0.0
    } else {
        (fold_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(CvSummary {
        folds: fold_values.to_vec(),
        mean,
        std,
    })
}

/// One line of a metrics report. `appliance` is an appliance name, or
/// `macro` for the macro average; `fold` is a fold number or `mean`/`std`
/// on summary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub fold: String,
    pub appliance: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub rmse_norm: f64,
    pub mae_norm: f64,
    pub rmse_watts: f64,
    pub mae_watts: f64,
}

impl MetricRow {
    pub fn new(
        dataset: impl Into<String>,
        fold: impl Into<String>,
        appliance: impl Into<String>,
        cls: ClassificationMetrics,
        reg_norm: RegressionMetrics,
        rated_capacity: f64,
    ) -> Self {
        let watts = reg_norm.scaled(rated_capacity);
        MetricRow {
            dataset: dataset.into(),
            fold: fold.into(),
            appliance: appliance.into(),
            accuracy: cls.accuracy,
            recall: cls.recall,
            precision: cls.precision,
            f1: cls.f1,
            rmse_norm: reg_norm.rmse,
            mae_norm: reg_norm.mae,
            rmse_watts: watts.rmse,
            mae_watts: watts.mae,
        }
    }

    fn values(&self) -> [f64; 8] {
        [
            self.accuracy,
            self.recall,
            self.precision,
            self.f1,
            self.rmse_norm,
            self.mae_norm,
            self.rmse_watts,
            self.mae_watts,
        ]
    }

    fn from_values(dataset: &str, fold: &str, appliance: &str, v: [f64; 8]) -> Self {
        MetricRow {
            dataset: dataset.into(),
            fold: fold.into(),
            appliance: appliance.into(),
            accuracy: v[0],
            recall: v[1],
            precision: v[2],
            f1: v[3],
            rmse_norm: v[4],
            mae_norm: v[5],
            rmse_watts: v[6],
            mae_watts: v[7],
        }
    }
}

/// Mean and standard-deviation rows (fold = `mean` / `std`) for every
/// appliance that appears in `rows`, in first-seen order.
pub fn summarize_rows(rows: &[MetricRow]) -> Result<Vec<MetricRow>> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.dataset.clone(), r.appliance.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = Vec::with_capacity(keys.len() * 2);
    for (dataset, appliance) in keys {
        let group: Vec<[f64; 8]> = rows
            .iter()
            .filter(|r| r.dataset == dataset && r.appliance == appliance)
            .map(MetricRow::values)
            .collect();
        let mut mean = [0.0; 8];
        let mut std = [0.0; 8];
        for i in 0..8 {
            let s = aggregate_cv(&group.iter().map(|v| v[i]).collect::<Vec<_>>())?;
            mean[i] = s.mean;
            std[i] = s.std;
        }
        out.push(MetricRow::from_values(&dataset, "mean", &appliance, mean));
        out.push(MetricRow::from_values(&dataset, "std", &appliance, std));
    }
    Ok(out)
}

pub fn write_metric_rows<W: io::Write>(rows: &[MetricRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        // Keep an empty table readable as one.
        w.write_record([
            "dataset",
            "fold",
            "appliance",
            "accuracy",
            "recall",
            "precision",
            "f1",
            "rmse_norm",
            "mae_norm",
            "rmse_watts",
            "mae_watts",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metric_rows(rows, file).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line() as usize),
                reason: e.to_string(),
            })
        })
        .collect()
}

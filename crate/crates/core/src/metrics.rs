//! Top-1 accuracy, mean class accuracy, and the confusion matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub top1: f64,
    /// Mean recall over classes with at least one sample.
    pub mca: f64,
    /// `None` for classes with no samples.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`
    pub confusion: Vec<Vec<u64>>,
    pub excluded_classes: usize,
    /// Mean cross-entropy when the caller supplied one.
    pub loss: Option<f64>,
}

/// Builds a report from label vectors over `num_classes` classes.
pub fn evaluate(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Range(format!("label pair ({t}, {p}) outside {num_classes} classes")));
        }
        confusion[t][p] += 1;
    }
    Ok(from_confusion(confusion))
}

/// Recomputes every statistic from a confusion matrix; shards merge by adding
/// their matrices.
pub fn from_confusion(confusion: Vec<Vec<u64>>) -> EvalReport {
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = confusion.iter().enumerate().map(|(i, row)| row[i]).sum();
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    EvalReport {
        num_samples: total as usize,
        top1: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        mca: if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        excluded_classes: per_class_recall.len() - present.len(),
        per_class_recall,
        confusion,
        loss: None,
    }
}

pub fn merge(a: &EvalReport, b: &EvalReport) -> Result<EvalReport> {
    if a.confusion.len() != b.confusion.len() {
        return Err(Error::Contract("cannot merge reports over different class counts".into()));
    }
    let confusion = a
        .confusion
        .iter()
        .zip(&b.confusion)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect();
    Ok(from_confusion(confusion))
}

impl EvalReport {
    pub fn with_loss(mut self, loss: f64) -> Self {
        self.loss = Some(loss);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// Flat `key value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_samples {}", self.num_samples);
        let _ = writeln!(s, "top1 {}", self.top1);
        let _ = writeln!(s, "mca {}", self.mca);
        if let Some(l) = self.loss {
            let _ = writeln!(s, "loss {l}");
        }
        let _ = writeln!(s, "excluded_classes {}", self.excluded_classes);
        for (i, r) in self.per_class_recall.iter().enumerate() {
            match r {
                Some(r) => {
                    let _ = writeln!(s, "recall.{i} {r}");
                }
                None => {
                    let _ = writeln!(s, "recall.{i} none");
                }
            }
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "confusion.{i} {}", cells.join(","));
        }
        s
    }
}

/// Scores the predictor that always answers the most frequent training label
/// (lowest index on ties).
pub fn majority_baseline(train_labels: &[usize], test_labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    let mut counts = vec![0usize; num_classes];
    for &y in train_labels {
        if y >= num_classes {
            return Err(Error::Range(format!("label {y} outside {num_classes} classes")));
        }
        counts[y] += 1;
    }
    let majority = (0..num_classes).rev().max_by_key(|&c| counts[c]).unwrap_or(0);
    evaluate(&vec![majority; test_labels.len()], test_labels, num_classes)
}

pub const METRICS_HEADER: &str = "run_id,epoch,split,loss,top1,mca,lr";

/// One metrics CSV row in [`METRICS_HEADER`] order.
pub fn csv_row(run_id: &str, epoch: usize, split: &str, report: &EvalReport, lr: f64) -> String {
    let loss = report.loss.map(|l| l.to_string()).unwrap_or_default();
    format!("{run_id},{epoch},{split},{loss},{},{},{lr}", report.top1, report.mca)
}

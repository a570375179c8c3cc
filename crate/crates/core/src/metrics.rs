//! Accuracy, macro-F1 and the per-sequence direction error rate (Err#).
//!
//! Predictions that could not be parsed, or that name a label outside the
//! declared set, fall into a reserved `none` column: they are false negatives
//! for the gold class and never a class of their own.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NONE_LABEL: &str = "none";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no graded instances")]
    EmptyRun,
    #[error("class `{0}` has no gold instances")]
    EmptyClass(String),
    #[error("sequence {index}: gold has {gold} labels, prediction has {predicted}")]
    LengthMismatch {
        index: usize,
        gold: usize,
        predicted: usize,
    },
    #[error("gold label `{0}` is not a declared class")]
    UnknownLabel(String),
    #[error("confusion counts must be {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
}

/// Gold rows by predicted columns; the final column is `none`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n + 1]; n],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let (rows, cols) = (labels.len(), labels.len() + 1);
        if counts.len() != rows || counts.iter().any(|r| r.len() != cols) {
            return Err(MetricsError::Shape { rows, cols });
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn record(&mut self, gold: &str, predicted: Option<&str>) -> Result<(), MetricsError> {
        let g = self
            .index(gold)
            .ok_or_else(|| MetricsError::UnknownLabel(gold.to_string()))?;
        let p = predicted
            .and_then(|p| self.index(p))
            .unwrap_or(self.labels.len());
        self.counts[g][p] += 1;
        Ok(())
    }

    /// Count of (gold, predicted); `predicted == None` reads the `none` column.
    pub fn count(&self, gold: usize, predicted: Option<usize>) -> u64 {
        self.counts[gold][predicted.unwrap_or(self.labels.len())]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn per_class(&self) -> Vec<ClassScore> {
        let n = self.labels.len();
        (0..n)
            .map(|i| {
                let tp = self.counts[i][i];
                let support: u64 = self.counts[i].iter().sum();
                let predicted: u64 = (0..n).map(|g| self.counts[g][i]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScore {
                    label: self.labels[i].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Exact-match fraction over (gold, predicted) pairs.
pub fn accuracy<T: PartialEq>(pairs: &[(T, T)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let hits = pairs.iter().filter(|(g, p)| g == p).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Unweighted mean of per-class F1 over the declared classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    if cm.labels.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let scores = cm.per_class();
    if let Some(empty) = scores.iter().find(|s| s.support == 0) {
        return Err(MetricsError::EmptyClass(empty.label.clone()));
    }
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

/// Mean over sequences of wrong labels / label count. A `None` prediction
/// (unparseable) counts every label in that sequence as wrong.
pub fn err_rate<L: PartialEq>(runs: &[(Vec<L>, Option<Vec<L>>)]) -> Result<f64, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let mut total = 0.0;
    for (index, (gold, predicted)) in runs.iter().enumerate() {
        if gold.is_empty() {
            return Err(MetricsError::LengthMismatch {
                index,
                gold: 0,
                predicted: predicted.as_ref().map_or(0, Vec::len),
            });
        }
        let wrong = match predicted {
            None => gold.len(),
            Some(p) if p.len() != gold.len() => {
                return Err(MetricsError::LengthMismatch {
                    index,
                    gold: gold.len(),
                    predicted: p.len(),
                })
            }
            Some(p) => gold.iter().zip(p).filter(|(g, p)| g != p).count(),
        };
        total += wrong as f64 / gold.len() as f64;
    }
    Ok(total / runs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtypeScore {
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err_rate: Option<f64>,
    pub per_class: Vec<ClassScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_subtype: Option<BTreeMap<String, SubtypeScore>>,
    /// Multi-answer questions scored correct only when every gold answer is
    /// given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_accuracy: Option<f64>,
}

//! Precision, recall and F1 at a rank cutoff.

use std::collections::HashMap;

use crate::ids::ImageId;

use super::EvalError;

/// Confusion counts and ratios for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl QueryMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        QueryMetrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cutoff: usize,
    /// Mean precision over queries.
    pub precision: f64,
    /// Mean recall over queries.
    pub recall: f64,
    /// Harmonic mean of the averaged precision and recall.
    pub f1: f64,
    pub per_query: Vec<QueryMetrics>,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Ground truth: category of every corpus image and category sizes.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    labels: HashMap<ImageId, String>,
    sizes: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new<'a>(items: impl IntoIterator<Item = (&'a ImageId, &'a str)>) -> Self {
        let mut truth = GroundTruth::default();
        for (id, label) in items {
            truth.labels.insert(id.clone(), label.to_string());
            *truth.sizes.entry(label.to_string()).or_default() += 1;
        }
        truth
    }

    pub fn label(&self, id: &ImageId) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn category_size(&self, label: &str) -> usize {
        self.sizes.get(label).copied().unwrap_or(0)
    }

    pub fn is_match(&self, id: &ImageId, label: &str) -> Result<bool, EvalError> {
        self.label(id)
            .map(|l| l == label)
            .ok_or_else(|| EvalError::Consistency(format!("result {id} is not in the ground truth")))
    }
}

/// Metrics of one ranked result list cut at `cutoff`.
pub fn query_metrics(
    results: &[ImageId],
    truth: &GroundTruth,
    label: &str,
    cutoff: usize,
) -> Result<QueryMetrics, EvalError> {
    if cutoff == 0 || cutoff > results.len() {
        return Err(EvalError::Cutoff {
            cutoff,
            available: results.len(),
        });
    }
    let mut tp = 0;
    for id in &results[..cutoff] {
        if truth.is_match(id, label)? {
            tp += 1;
        }
    }
    let relevant = truth.category_size(label);
    Ok(QueryMetrics::from_counts(tp, cutoff - tp, relevant.saturating_sub(tp)))
}

/// Averages [`query_metrics`] over `(ranked results, query label)` pairs.
pub fn compute_metrics(
    runs: &[(Vec<ImageId>, String)],
    truth: &GroundTruth,
    cutoff: usize,
) -> Result<MetricsReport, EvalError> {
    let per_query = runs
        .iter()
        .map(|(results, label)| query_metrics(results, truth, label, cutoff))
        .collect::<Result<Vec<_>, _>>()?;
    let n = per_query.len().max(1) as f64;
    let precision = per_query.iter().map(|m| m.precision).sum::<f64>() / n;
    let recall = per_query.iter().map(|m| m.recall).sum::<f64>() / n;
    Ok(MetricsReport {
        cutoff,
        precision,
        recall,
        f1: f1(precision, recall),
        per_query,
    })
}

//! Where the true matches land inside a returned result list.
//!
//! For every query the result list is split into equal rank ranges
//! (deciles by default) and the same-category hits in each range are
//! counted. Pooled over queries, a ranking that orders by similarity puts
//! most hits in the first range; a ranking that carries no similarity
//! signal within the list spreads them evenly.

use crate::ids::ImageId;

use super::metrics::GroundTruth;
use super::EvalError;

/// Queries below which the histogram is flagged as statistically weak.
pub const MIN_QUERIES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageHistogram {
    /// Hits per range, pooled over queries.
    pub counts: Vec<usize>,
    /// `counts` divided by their total; sums to 1 unless there were no hits.
    pub fractions: Vec<f64>,
    pub queries: usize,
    pub warnings: Vec<String>,
}

impl LeakageHistogram {
    pub fn total_hits(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Index of the range with the largest fraction (first on ties).
    pub fn argmax(&self) -> usize {
        self.fractions
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0
    }

    /// Tab-separated `range\tcount\tfraction` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("decile\tmatches\tfraction\n");
        for (i, (c, f)) in self.counts.iter().zip(&self.fractions).enumerate() {
            out.push_str(&format!("{}\t{c}\t{f:.4}\n", i + 1));
        }
        out
    }
}

/// Pools hit positions over `runs` of `(ranked results, query label)`.
///
/// Rank `r` of a list of length `n` falls into range `r * bins / n`.
pub fn leakage_histogram(
    runs: &[(Vec<ImageId>, String)],
    truth: &GroundTruth,
    bins: usize,
) -> Result<LeakageHistogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::Consistency("histogram needs at least one range".into()));
    }
    let mut counts = vec![0usize; bins];
    for (results, label) in runs {
        let n = results.len();
        for (rank, id) in results.iter().enumerate() {
            if truth.is_match(id, label)? {
                counts[rank * bins / n] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    let mut warnings = Vec::new();
    if runs.len() < MIN_QUERIES {
        warnings.push(format!(
            "only {} queries; at least {MIN_QUERIES} are needed for a meaningful distribution",
            runs.len()
        ));
    }
    if total == 0 {
        warnings.push("no true matches in any result list".into());
    }
    Ok(LeakageHistogram {
        counts,
        fractions,
        queries: runs.len(),
        warnings,
    })
}

//! Distances between feature vectors.
//!
//! * [`euc_dis`]: plain Euclidean distance.
//! * [`new_dis`]: Euclidean distance with the cross term `Σ x_i y_i`
//!   replaced by `u · mean(x) · mean(y)`. It depends on each vector only
//!   through `(Σx, Σx²)`, so it can be evaluated on sums recovered from
//!   ciphertexts. It is not a metric: `new_dis(x, x)` is zero only for
//!   constant vectors.
//! * [`sim_from_sums`]: `new_dis` evaluated directly on those sums.
//!
//! All radicands are formed in exact integer arithmetic scaled by the
//! dimension and only converted to `f64` for the final square root.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vectors must be non-empty")]
    Empty,
    #[error("dimension {0} is below 3")]
    DimensionTooSmall(usize),
    #[error("sums violate s2 >= s1^2 / l (s1={s1}, s2={s2}, l={l})")]
    CorruptedSums { s1: u64, s2: u64, l: usize },
}

/// `(Σ a_j, Σ a_j², l)` for one feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SumPair {
    pub s1: u64,
    pub s2: u64,
    pub l: usize,
}

impl SumPair {
    pub fn new(s1: u64, s2: u64, l: usize) -> Result<Self, SimilarityError> {
        if l < 3 {
            return Err(SimilarityError::DimensionTooSmall(l));
        }
        if (l as u128) * u128::from(s2) < u128::from(s1) * u128::from(s1) {
            return Err(SimilarityError::CorruptedSums { s1, s2, l });
        }
        Ok(SumPair { s1, s2, l })
    }

    /// Sums of a plaintext vector.
    pub fn of(values: &[u32]) -> Result<Self, SimilarityError> {
        let s1 = values.iter().map(|&v| u64::from(v)).sum();
        let s2 = values.iter().map(|&v| u64::from(v) * u64::from(v)).sum();
        Self::new(s1, s2, values.len())
    }
}

/// `l · Sim²` as an exact integer; the ranking key for encrypted retrieval.
pub fn scaled_sim_radicand(a: &SumPair, b: &SumPair) -> Result<i128, SimilarityError> {
    if a.l != b.l {
        return Err(SimilarityError::LengthMismatch(a.l, b.l));
    }
    let l = a.l as i128;
    let r = l * (i128::from(a.s2) + i128::from(b.s2)) - 2 * i128::from(a.s1) * i128::from(b.s1);
    if r < 0 {
        let bad = if (l as u128) * u128::from(a.s2) < u128::from(a.s1).pow(2) { a } else { b };
        return Err(SimilarityError::CorruptedSums {
            s1: bad.s1,
            s2: bad.s2,
            l: bad.l,
        });
    }
    Ok(r)
}

pub fn sim_from_sums(a: &SumPair, b: &SumPair) -> Result<f64, SimilarityError> {
    let r = scaled_sim_radicand(a, b)?;
    Ok((r as f64 / a.l as f64).sqrt())
}

pub fn euc_dis(x: &[u32], y: &[u32]) -> Result<f64, SimilarityError> {
    Ok((squared_euclidean(x, y)? as f64).sqrt())
}

/// `Σ (x_i - y_i)²` exactly.
pub fn squared_euclidean(x: &[u32], y: &[u32]) -> Result<u64, SimilarityError> {
    check_lengths(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = u64::from(a.abs_diff(b));
            d * d
        })
        .sum())
}

pub fn new_dis(x: &[u32], y: &[u32]) -> Result<f64, SimilarityError> {
    let r = scaled_new_dis_radicand(x, y)?;
    Ok((r as f64 / x.len() as f64).sqrt())
}

/// `u · NewDis²` as an exact integer.
pub fn scaled_new_dis_radicand(x: &[u32], y: &[u32]) -> Result<i128, SimilarityError> {
    check_lengths(x, y)?;
    let sum = |v: &[u32]| v.iter().map(|&a| i128::from(a)).sum::<i128>();
    let sum_sq = |v: &[u32]| v.iter().map(|&a| i128::from(a) * i128::from(a)).sum::<i128>();
    let u = x.len() as i128;
    let r = u * (sum_sq(x) + sum_sq(y)) - 2 * sum(x) * sum(y);
    debug_assert!(r >= 0, "Cauchy-Schwarz guarantees a non-negative radicand");
    Ok(r)
}

fn check_lengths(x: &[u32], y: &[u32]) -> Result<(), SimilarityError> {
    if x.len() != y.len() {
        return Err(SimilarityError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(SimilarityError::Empty);
    }
    Ok(())
}

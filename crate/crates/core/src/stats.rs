//! Rank statistics shared by calibration, ranking and evaluation.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("correlation undefined for a constant input")]
    ConstantInput,
    #[error("input contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub spearman: f64,
    pub kendall: f64,
}

/// 1-based ranks with ties receiving the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

fn check(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(StatsError::ConstantInput);
    }
    Ok(())
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y)?;
    crate::math::pearson(&average_ranks(x), &average_ranks(y)).ok_or(StatsError::ConstantInput)
}

/// Kendall tau-b in O(n log n) (Knight's merge-sort method).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |t: u64| t * (t - 1) / 2;
    let n0 = pairs(n as u64);
    let (mut n1, mut n3) = (0u64, 0u64);
    let (mut tx, mut txy) = (1u64, 1u64);
    for k in 1..n {
        let (a, b) = (idx[k - 1], idx[k]);
        if x[a] == x[b] {
            tx += 1;
            if y[a] == y[b] {
                txy += 1;
            } else {
                n3 += pairs(txy);
                txy = 1;
            }
        } else {
            n1 += pairs(tx);
            n3 += pairs(txy);
            tx = 1;
            txy = 1;
        }
    }
    n1 += pairs(tx);
    n3 += pairs(txy);

    let mut ys: Vec<f64> = idx.iter().map(|&k| y[k]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut n2 = 0u64;
    let mut ty = 1u64;
    for k in 1..n {
        if ys[k] == ys[k - 1] {
            ty += 1;
        } else {
            n2 += pairs(ty);
            ty = 1;
        }
    }
    n2 += pairs(ty);

    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    let den = sqrt((n0 - n1) as f64 * (n0 - n2) as f64);
    Ok(num / den)
}

/// Stable merge sort counting strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

pub fn rank_correlations(x: &[f64], y: &[f64]) -> Result<RankCorrelation, StatsError> {
    Ok(RankCorrelation {
        spearman: spearman(x, y)?,
        kendall: kendall_tau_b(x, y)?,
    })
}

/// Area under the ROC curve (Mann-Whitney, ties counted as one half).
/// `None` when only one class is present.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, q) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks_split_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn small_example() {
        let r = rank_correlations(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r.spearman - 0.5).abs() < 1e-15);
        assert!((r.kendall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_an_error() {
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ConstantInput));
        assert_eq!(kendall_tau_b(&[1.0, 2.0], &[3.0, 3.0]), Err(StatsError::ConstantInput));
        assert_eq!(spearman(&[1.0], &[1.0]), Err(StatsError::TooShort(1)));
    }

    #[test]
    fn auc_counts_ties_as_half() {
        assert_eq!(auc_roc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auc_roc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auc_roc(&[0.5, 0.7], &[true, true]), None);
    }
}

//! Deterministic ranking helpers shared by the pruning and merging kernels.
//!
//! Every selection breaks ties by ascending index so results do not depend on
//! the platform's sort implementation.

use alloc::vec::Vec;
use core::cmp::Ordering;

/// All indices ordered by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| desc_then_index(scores, a, b));
    idx
}

/// Indices of the `k` largest scores in rank order (ties by ascending index).
pub fn top_k_desc(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, |&a, &b| desc_then_index(scores, a, b));
    }
    idx.truncate(k);
    idx.sort_by(|&a, &b| desc_then_index(scores, a, b));
    idx
}

/// Indices of the `k` largest scores, sorted ascending by index.
pub fn top_k_sorted(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx = top_k_desc(scores, k);
    idx.sort_unstable();
    idx
}

#[inline]
fn desc_then_index(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// `ceil(ratio * n)` clamped to `0..=n`, ignoring float noise such as
/// `0.7 * 100 = 70.00000000000001`.
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let nearest = libm::round(x);
    let k = if (x - nearest).abs() <= 1e-9 * (1.0 + x.abs()) { nearest } else { libm::ceil(x) };
    (k.max(0.0) as usize).min(n)
}

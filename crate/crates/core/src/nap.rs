//! Neighbor-aware pruning.
//!
//! Each image token gets an importance score
//! `xi = (1 - alpha) * cls_attn + alpha * phi`, where `phi` is the received
//! attention smoothed along the sequence by a `1 / (|d| + 1)` kernel with zero
//! padding. The highest-scoring tokens are kept in sequence order; the rest are
//! averaged into a single fused token appended at the end.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::select::{ceil_count, top_k_sorted};
use crate::tokens::TokenBatch;
use crate::vit::AttentionMap;

/// Normalized distance-decay kernel of size `2R + 1`, indexed by offset `-R..=R`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborKernel {
    radius: usize,
    weights: Vec<f64>,
}

impl NeighborKernel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Weights for offsets `-R..=R`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, offset: isize) -> f64 {
        self.weights[(offset + self.radius as isize) as usize]
    }
}

pub fn build_kernel(radius: usize) -> NeighborKernel {
    let raw: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|d| 1.0 / (d.unsigned_abs() as f64 + 1.0))
        .collect();
    let total: f64 = raw.iter().sum();
    NeighborKernel {
        radius,
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

/// How the discarded tokens are averaged into the fused token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusedWeighting {
    /// Weighted by importance score.
    #[default]
    Xi,
    Uniform,
    /// Weighted by token size; keeps the size-weighted feature sum unchanged.
    Size,
}

impl FusedWeighting {
    pub fn name(self) -> &'static str {
        match self {
            FusedWeighting::Xi => "xi",
            FusedWeighting::Uniform => "uniform",
            FusedWeighting::Size => "size",
        }
    }
}

impl fmt::Display for FusedWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusedWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xi" => Ok(FusedWeighting::Xi),
            "uniform" => Ok(FusedWeighting::Uniform),
            "size" => Ok(FusedWeighting::Size),
            _ => Err(Error::InvalidArgument("fused weighting must be xi, uniform or size")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NapConfig {
    pub radius: usize,
    pub alpha: f64,
    pub keep_ratio: f64,
    /// 0-indexed blocks after whose attention pruning runs.
    pub layers: Vec<usize>,
    pub fused_weighting: FusedWeighting,
}

impl Default for NapConfig {
    fn default() -> Self {
        Self {
            radius: 3,
            alpha: 0.1,
            keep_ratio: 0.7,
            layers: vec![3, 6, 9],
            fused_weighting: FusedWeighting::Xi,
        }
    }
}

impl NapConfig {
    /// Setting used for 384px inputs.
    pub fn high_resolution() -> Self {
        Self {
            alpha: 0.95,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_keep_ratio(self.keep_ratio)
    }
}

/// Score components per sample, each of length `M = N - 1` (token `i + 1` at index `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub r_attn: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub cls_attn: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    pub alpha: f64,
}

/// Per-sample outcome of a pruning step. Indices refer to the input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub keep_indices: Vec<usize>,
    pub fused_source_indices: Vec<usize>,
    pub keep_ratio: f64,
}

/// Average attention each token (class token excluded) receives over all
/// queries and heads.
pub fn received_attention(attn: &AttentionMap) -> Result<Vec<Vec<f64>>> {
    let n = attn.tokens();
    if n < 2 {
        return Err(Error::InvalidArgument("attention map needs at least two tokens"));
    }
    let heads = attn.heads();
    let mut out = Vec::with_capacity(attn.batch());
    for b in 0..attn.batch() {
        let mut acc = vec![0.0; n - 1];
        for h in 0..heads {
            let mut col = vec![0.0; n - 1];
            for q in 0..n {
                for (c, &w) in col.iter_mut().zip(&attn.row(b, h, q)[1..]) {
                    *c += w;
                }
            }
            for (a, c) in acc.iter_mut().zip(col) {
                *a += c / n as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= heads as f64);
        out.push(acc);
    }
    Ok(out)
}

/// Class-token query's attention to every other token, averaged over heads.
pub fn class_attention(attn: &AttentionMap) -> Result<Vec<Vec<f64>>> {
    let n = attn.tokens();
    if n < 2 {
        return Err(Error::InvalidArgument("attention map needs at least two tokens"));
    }
    let heads = attn.heads();
    Ok((0..attn.batch())
        .map(|b| {
            let mut acc = vec![0.0; n - 1];
            for h in 0..heads {
                for (a, &w) in acc.iter_mut().zip(&attn.row(b, h, 0)[1..]) {
                    *a += w;
                }
            }
            acc.iter_mut().for_each(|a| *a /= heads as f64);
            acc
        })
        .collect())
}

/// 1D convolution of each row with `kernel`; out-of-range terms count as zero.
pub fn neighbor_awareness(r_attn: &[Vec<f64>], kernel: &NeighborKernel) -> Vec<Vec<f64>> {
    let r = kernel.radius() as isize;
    r_attn
        .iter()
        .map(|row| {
            let m = row.len() as isize;
            (0..m)
                .map(|i| {
                    let lo = (i - r).max(0);
                    let hi = (i + r).min(m - 1);
                    (lo..=hi).map(|j| kernel.weight(j - i) * row[j as usize]).sum()
                })
                .collect()
        })
        .collect()
}

/// `(1 - alpha) * cls_attn + alpha * phi`, elementwise.
pub fn importance(cls_attn: &[Vec<f64>], phi: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>> {
    check_alpha(alpha)?;
    if cls_attn.len() != phi.len() {
        return Err(Error::ShapeMismatch("importance batch", cls_attn.len(), phi.len()));
    }
    cls_attn
        .iter()
        .zip(phi)
        .map(|(c, p)| {
            if c.len() != p.len() {
                return Err(Error::ShapeMismatch("importance length", c.len(), p.len()));
            }
            Ok(c.iter().zip(p).map(|(&c, &p)| (1.0 - alpha) * c + alpha * p).collect())
        })
        .collect()
}

/// All score components for one attention map.
pub fn score_tokens(attn: &AttentionMap, kernel: &NeighborKernel, alpha: f64) -> Result<ImportanceVector> {
    let r_attn = received_attention(attn)?;
    let phi = neighbor_awareness(&r_attn, kernel);
    let cls_attn = class_attention(attn)?;
    let xi = importance(&cls_attn, &phi, alpha)?;
    Ok(ImportanceVector {
        r_attn,
        phi,
        cls_attn,
        xi,
        alpha,
    })
}

/// Keeps `ceil(keep_ratio * M)` of the prunable tokens (by descending `xi`,
/// ties to the lower index) and fuses the rest. A fused tail token left by an
/// earlier step is never kept on its own; it is folded into the new fused token.
pub fn prune(
    tokens: &TokenBatch,
    xi: &[Vec<f64>],
    keep_ratio: f64,
    weighting: FusedWeighting,
) -> Result<(TokenBatch, Vec<PrunePlan>)> {
    check_keep_ratio(keep_ratio)?;
    let keep = ceil_count(keep_ratio, prunable(tokens));
    prune_to(tokens, xi, keep, keep_ratio, weighting)
}

/// Number of tokens eligible for keeping: not protected, not a fused tail.
pub fn prunable(tokens: &TokenBatch) -> usize {
    tokens.unprotected() - usize::from(tokens.fused_tail())
}

/// [`prune`] with an explicit kept count.
pub fn prune_to(
    tokens: &TokenBatch,
    xi: &[Vec<f64>],
    keep: usize,
    keep_ratio: f64,
    weighting: FusedWeighting,
) -> Result<(TokenBatch, Vec<PrunePlan>)> {
    let (p, t) = (tokens.protected(), tokens.len());
    if p == 0 {
        return Err(Error::Config("pruning needs a class token at position 0"));
    }
    let candidates = prunable(tokens);
    if keep > candidates {
        return Err(Error::InvalidArgument("cannot keep more tokens than are prunable"));
    }
    if xi.len() != tokens.batch() {
        return Err(Error::ShapeMismatch("importance batch", tokens.batch(), xi.len()));
    }
    if let Some(row) = xi.iter().find(|row| row.len() != t - 1) {
        return Err(Error::ShapeMismatch("importance length", t - 1, row.len()));
    }

    let mut plans = Vec::with_capacity(tokens.batch());
    for row in xi {
        let cand_scores = &row[p - 1..p - 1 + candidates];
        let keep_indices: Vec<usize> = top_k_sorted(cand_scores, keep).into_iter().map(|j| p + j).collect();
        let mut fused_source_indices = Vec::with_capacity(t - p - keep);
        let mut next = keep_indices.iter().peekable();
        for i in p..t {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                fused_source_indices.push(i);
            }
        }
        plans.push(PrunePlan {
            keep_indices,
            fused_source_indices,
            keep_ratio,
        });
    }

    if keep == candidates {
        return Ok((tokens.clone(), plans));
    }

    let out_len = p + keep + 1;
    let dim = tokens.dim();
    let mut features = Vec::with_capacity(tokens.batch() * out_len * dim);
    let mut sizes = Vec::with_capacity(tokens.batch() * out_len);
    let mut provenance = Vec::with_capacity(tokens.batch() * out_len);
    for (b, plan) in plans.iter().enumerate() {
        for i in (0..p).chain(plan.keep_indices.iter().copied()) {
            features.extend_from_slice(tokens.token(b, i));
            sizes.push(tokens.size(b, i));
            provenance.push(tokens.provenance(b, i).to_vec());
        }
        let src = &plan.fused_source_indices;
        let mut weights: Vec<f64> = match weighting {
            FusedWeighting::Xi => src.iter().map(|&i| xi[b][i - 1]).collect(),
            FusedWeighting::Uniform => vec![1.0; src.len()],
            FusedWeighting::Size => src.iter().map(|&i| tokens.size(b, i)).collect(),
        };
        let mut total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            weights.iter_mut().for_each(|w| *w = 1.0);
            total = src.len() as f64;
        }
        let mut fused = vec![0.0; dim];
        for (&i, &w) in src.iter().zip(&weights) {
            for (f, &x) in fused.iter_mut().zip(tokens.token(b, i)) {
                *f += w * x;
            }
        }
        fused.iter_mut().for_each(|f| *f /= total);
        features.extend_from_slice(&fused);
        sizes.push(src.iter().map(|&i| tokens.size(b, i)).sum());
        let mut cells: Vec<u32> = src.iter().flat_map(|&i| tokens.provenance(b, i).iter().copied()).collect();
        cells.sort_unstable();
        provenance.push(cells);
    }
    let out = TokenBatch::from_parts(tokens.batch(), out_len, dim, p, features, sizes, provenance, true)?;
    Ok((out, plans))
}

/// Scores the tokens from `attn` and prunes them with `cfg`.
pub fn nap_layer(
    tokens: &TokenBatch,
    attn: &AttentionMap,
    cfg: &NapConfig,
) -> Result<(TokenBatch, ImportanceVector, Vec<PrunePlan>)> {
    cfg.validate()?;
    if attn.tokens() != tokens.len() || attn.batch() != tokens.batch() {
        return Err(Error::ShapeMismatch("attention tokens", tokens.len(), attn.tokens()));
    }
    if tokens.protected() == 0 {
        return Err(Error::Config("pruning needs a class token at position 0"));
    }
    let scores = score_tokens(attn, &build_kernel(cfg.radius), cfg.alpha)?;
    let (out, plans) = prune(tokens, &scores.xi, cfg.keep_ratio, cfg.fused_weighting)?;
    Ok((out, scores, plans))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("alpha must lie in [0, 1]"))
    }
}

fn check_keep_ratio(keep_ratio: f64) -> Result<()> {
    if keep_ratio > 0.0 && keep_ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument("keep_ratio must lie in (0, 1]"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_1d(values: &[f64]) -> TokenBatch {
        let mut f = vec![0.0];
        f.extend_from_slice(values);
        TokenBatch::new(1, values.len() + 1, 1, 1, f).unwrap()
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(build_kernel(0).weights(), &[1.0]);
        assert_eq!(build_kernel(1).weights(), &[0.25, 0.5, 0.25]);
        let k3 = build_kernel(3);
        assert!((k3.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for d in 1..=3 {
            assert_eq!(k3.weight(d), k3.weight(-d));
            assert!(k3.weight(0) > k3.weight(d));
        }
    }

    #[test]
    fn received_attention_uniform_and_hand_example() {
        let n = 5;
        let uniform = AttentionMap::from_weights(1, 2, n, vec![1.0 / n as f64; 2 * n * n]).unwrap();
        for v in &received_attention(&uniform).unwrap()[0] {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let rows = [0.0, 0.3, 0.7].repeat(3);
        let map = AttentionMap::from_weights(1, 1, 3, rows).unwrap();
        let r = received_attention(&map).unwrap();
        assert!((r[0][0] - 0.3).abs() < 1e-15 && (r[0][1] - 0.7).abs() < 1e-15);
        let tiny = AttentionMap::from_weights(1, 1, 1, vec![1.0]).unwrap();
        assert!(received_attention(&tiny).is_err());
    }

    #[test]
    fn neighbor_awareness_examples() {
        let phi = neighbor_awareness(&[vec![0.0, 1.0, 0.0]], &build_kernel(1));
        assert_eq!(phi[0], vec![0.25, 0.5, 0.25]);
        let flat = neighbor_awareness(&[vec![0.3; 11]], &build_kernel(3));
        for &v in &flat[0][3..8] {
            assert!((v - 0.3).abs() < 1e-15);
        }
        // zero padding shrinks the ends
        assert!(flat[0][0] < 0.3);
    }

    #[test]
    fn importance_examples() {
        let cls = vec![vec![0.2, 0.5]];
        let phi = vec![vec![0.6, 0.1]];
        assert_eq!(importance(&cls, &phi, 0.0).unwrap(), cls);
        assert_eq!(importance(&cls, &phi, 1.0).unwrap(), phi);
        let xi = importance(&cls, &phi, 0.1).unwrap();
        assert!((xi[0][0] - 0.24).abs() < 1e-15);
        assert!(matches!(importance(&cls, &phi, 1.5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn keep_all_is_identity() {
        let t = batch_1d(&[1.0, 2.0, 3.0, 4.0]);
        let (out, plans) = prune(&t, &[vec![0.1, 0.4, 0.2, 0.3]], 1.0, FusedWeighting::Xi).unwrap();
        assert_eq!(out, t);
        assert_eq!(plans[0].keep_indices, vec![1, 2, 3, 4]);
        assert!(plans[0].fused_source_indices.is_empty());
    }

    #[test]
    fn hand_example_fuses_by_importance() {
        let t = batch_1d(&[1.0, 2.0, 3.0, 5.0]);
        let (out, plans) = prune(&t, &[vec![0.4, 0.3, 0.2, 0.1]], 0.5, FusedWeighting::Xi).unwrap();
        assert_eq!(plans[0].keep_indices, vec![1, 2]);
        assert_eq!(plans[0].fused_source_indices, vec![3, 4]);
        assert_eq!(out.len(), 4);
        let expected = (0.2 * 3.0 + 0.1 * 5.0) / 0.3;
        assert!((out.token(0, 3)[0] - expected).abs() < 1e-12);
        assert_eq!(out.size(0, 3), 2.0);
        assert_eq!(out.provenance(0, 3), &[2, 3]);
        assert!(out.fused_tail());
    }

    #[test]
    fn ties_keep_lowest_indices() {
        let t = batch_1d(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (out, plans) = prune(&t, &[vec![0.2; 5]], 0.5, FusedWeighting::Uniform).unwrap();
        assert_eq!(plans[0].keep_indices, vec![1, 2, 3]);
        assert_eq!(out.len(), 1 + 3 + 1);
        assert_eq!(out.token(0, 4)[0], 4.5);
    }

    #[test]
    fn previous_fused_token_is_folded_in() {
        let t = batch_1d(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (once, _) = prune(&t, &[vec![0.6, 0.5, 0.4, 0.3, 0.2, 0.1]], 0.5, FusedWeighting::Size).unwrap();
        assert_eq!(once.len(), 5);
        let (twice, plans) = prune(&once, &[vec![0.1, 0.3, 0.2, 0.9]], 0.5, FusedWeighting::Size).unwrap();
        // 3 prunable tokens -> keep 2; token 1 and the old fused token 4 fuse
        assert_eq!(plans[0].keep_indices, vec![2, 3]);
        assert_eq!(plans[0].fused_source_indices, vec![1, 4]);
        assert_eq!(twice.len(), 4);
        assert_eq!(twice.size(0, 3), 4.0);
        assert_eq!(twice.token(0, 3)[0], (1.0 + 4.0 + 5.0 + 6.0) / 4.0);
        twice.check_bookkeeping(6).unwrap();
    }

    #[test]
    fn invalid_keep_ratio() {
        let t = batch_1d(&[1.0, 2.0]);
        assert!(prune(&t, &[vec![0.5, 0.5]], 0.0, FusedWeighting::Xi).is_err());
        assert!(prune(&t, &[vec![0.5, 0.5]], 1.2, FusedWeighting::Xi).is_err());
        assert!(prune(&t, &[vec![0.5]], 0.5, FusedWeighting::Xi).is_err());
    }
}

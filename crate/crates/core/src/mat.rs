//! Merging of sequence-adjacent tokens.
//!
//! Only the `N = T - p - 1` neighboring pairs are scored. The `r` best pairs are
//! selected and sorted; pair `j` names destination `j` and source `j + 1`
//! (indices relative to the first mergeable token). Runs of consecutive
//! destinations are redirected to the start of their run, so a chain like
//! `1-2-3` collapses into one token instead of referencing token 2 twice.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::select::top_k_sorted;
use crate::tokens::TokenBatch;
use crate::vit::KeyTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    /// Negated symmetric KL divergence between softmax distributions of the
    /// unit-normalized features, so that larger still means more similar.
    SymmetricKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityFeature {
    /// Key vector averaged over heads.
    #[default]
    KMean,
    /// Token features.
    X,
    /// Per-head L2-normalized keys, concatenated.
    KL2Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimilarityConfig {
    pub metric: SimilarityMetric,
    pub feature: SimilarityFeature,
}

impl SimilarityFeature {
    pub fn needs_keys(self) -> bool {
        !matches!(self, SimilarityFeature::X)
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::SymmetricKl => "kl",
        })
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cos" => Ok(SimilarityMetric::Cosine),
            "kl" | "symkl" | "symmetric-kl" => Ok(SimilarityMetric::SymmetricKl),
            _ => Err(Error::InvalidArgument("metric must be cosine or kl")),
        }
    }
}

impl fmt::Display for SimilarityFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityFeature::KMean => "k-mean",
            SimilarityFeature::X => "x",
            SimilarityFeature::KL2Norm => "k-l2norm",
        })
    }
}

impl FromStr for SimilarityFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k-mean" | "kmean" | "k" => Ok(SimilarityFeature::KMean),
            "x" => Ok(SimilarityFeature::X),
            "k-l2norm" | "kl2norm" | "k-norm" => Ok(SimilarityFeature::KL2Norm),
            _ => Err(Error::InvalidArgument("feature must be k-mean, x or k-l2norm")),
        }
    }
}

/// Destinations, sources and run-start destinations of one merge step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Destinations {
    pub destinations: Vec<usize>,
    pub sources: Vec<usize>,
    pub filled: Vec<usize>,
}

/// Per-sample merge bookkeeping; indices are relative to the first mergeable token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergePlan {
    pub scores: Vec<f64>,
    pub r: usize,
    pub selected: Vec<usize>,
    pub destinations: Vec<usize>,
    pub sources: Vec<usize>,
    pub filled: Vec<usize>,
}

/// Tokens that may take part in merging: everything after the protected prefix
/// except a fused tail token.
pub fn mergeable(tokens: &TokenBatch) -> usize {
    tokens.unprotected() - usize::from(tokens.fused_tail())
}

pub(crate) fn similarity_feature(
    tokens: &TokenBatch,
    keys: Option<&KeyTensor>,
    feature: SimilarityFeature,
    b: usize,
    i: usize,
) -> Result<Vec<f64>> {
    if !feature.needs_keys() {
        return Ok(tokens.token(b, i).to_vec());
    }
    let keys = keys.ok_or(Error::Config("key-based similarity needs a key tensor"))?;
    if keys.tokens() != tokens.len() || keys.batch() != tokens.batch() {
        return Err(Error::ShapeMismatch("key tensor tokens", tokens.len(), keys.tokens()));
    }
    Ok(match feature {
        SimilarityFeature::KMean => keys.mean_key(b, i),
        SimilarityFeature::KL2Norm => {
            let mut out = Vec::with_capacity(keys.heads() * keys.head_dim());
            for h in 0..keys.heads() {
                let k = keys.key(b, h, i);
                let norm = l2(k);
                out.extend(k.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }));
            }
            out
        }
        SimilarityFeature::X => unreachable!(),
    })
}

fn l2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Cosine similarity; `-inf` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum()
}

/// `-(KL(P||Q) + KL(Q||P)) / 2` with `P`, `Q` the softmax of the unit-normalized
/// vectors; `-inf` when either vector is zero.
pub fn neg_symmetric_kl(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    let log_softmax = |v: &[f64], n: f64| -> Vec<f64> {
        let u: Vec<f64> = v.iter().map(|x| x / n).collect();
        let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(u.iter().map(|x| libm::exp(x - max)).sum::<f64>());
        u.iter().map(|x| x - lse).collect()
    };
    let (lp, lq) = (log_softmax(a, na), log_softmax(b, nb));
    let kl = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| libm::exp(*a) * (a - b)).sum() };
    -(kl(&lp, &lq) + kl(&lq, &lp)) / 2.0
}

/// Scores of the neighboring pairs `(p + j, p + j + 1)`, one row per sample.
pub fn adjacent_similarity(
    tokens: &TokenBatch,
    keys: Option<&KeyTensor>,
    cfg: SimilarityConfig,
) -> Result<Vec<Vec<f64>>> {
    let m = mergeable(tokens);
    if m < 2 {
        return Err(Error::InvalidArgument("need at least two mergeable tokens"));
    }
    let p = tokens.protected();
    let score = match cfg.metric {
        SimilarityMetric::Cosine => cosine,
        SimilarityMetric::SymmetricKl => neg_symmetric_kl,
    };
    (0..tokens.batch())
        .map(|b| {
            let feats = (p..p + m)
                .map(|i| similarity_feature(tokens, keys, cfg.feature, b, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(feats.windows(2).map(|w| score(&w[0], &w[1])).collect())
        })
        .collect()
}

/// Indices of the `r` highest scores, ascending.
pub fn select_pairs(scores: &[f64], r: usize) -> Result<Vec<usize>> {
    if r > scores.len() {
        return Err(Error::InvalidArgument("r exceeds the number of pairs"));
    }
    Ok(top_k_sorted(scores, r))
}

/// Destinations are the selected pair indices, sources the next token, and each
/// filled destination is the first destination of its run of consecutive indices.
pub fn resolve_destinations(selected: &[usize]) -> Destinations {
    debug_assert!(selected.windows(2).all(|w| w[0] < w[1]));
    let mut filled = Vec::with_capacity(selected.len());
    let mut start = 0;
    for (k, &d) in selected.iter().enumerate() {
        if k == 0 || d - selected[k - 1] > 1 {
            start = d;
        }
        filled.push(start);
    }
    Destinations {
        destinations: selected.to_vec(),
        sources: selected.iter().map(|d| d + 1).collect(),
        filled,
    }
}

/// Full plan for one sample from its pair scores.
pub fn plan_merge(scores: Vec<f64>, r: usize) -> Result<MergePlan> {
    let selected = select_pairs(&scores, r)?;
    let Destinations {
        destinations,
        sources,
        filled,
    } = resolve_destinations(&selected);
    Ok(MergePlan {
        scores,
        r,
        selected,
        destinations,
        sources,
        filled,
    })
}

/// Collapses each source into its filled destination with a size-weighted
/// average. Surviving tokens keep their order; the result has `T - r` tokens.
pub fn merge(tokens: &TokenBatch, plans: &[MergePlan]) -> Result<TokenBatch> {
    if plans.len() != tokens.batch() {
        return Err(Error::InconsistentPlan("one plan per sample required"));
    }
    let r = plans.first().map_or(0, |p| p.r);
    let m = mergeable(tokens);
    let p = tokens.protected();
    let mut groups: Vec<Vec<Vec<usize>>> = Vec::with_capacity(plans.len());
    for plan in plans {
        if plan.r != r || plan.sources.len() != r || plan.filled.len() != r {
            return Err(Error::InconsistentPlan("plans disagree on r"));
        }
        // group of absolute token indices per surviving token
        let mut owner: Vec<Option<usize>> = (0..m).map(Some).collect();
        for (&s, &f) in plan.sources.iter().zip(&plan.filled) {
            if s >= m || f >= s || owner[f] != Some(f) || owner[s] != Some(s) {
                return Err(Error::InconsistentPlan("source or destination out of place"));
            }
            owner[s] = None;
        }
        let mut sample: Vec<Vec<usize>> = Vec::with_capacity(m - r);
        let mut run_start = vec![0; m];
        for (j, o) in owner.iter().enumerate() {
            match o {
                Some(_) => {
                    sample.push(vec![p + j]);
                    run_start[j] = j;
                }
                None => {
                    sample
                        .last_mut()
                        .ok_or(Error::InconsistentPlan("source without destination"))?
                        .push(p + j);
                    run_start[j] = run_start[j - 1];
                }
            }
        }
        if plan.sources.iter().zip(&plan.filled).any(|(&s, &f)| run_start[s] != f) {
            return Err(Error::InconsistentPlan("source not contiguous with its destination"));
        }
        groups.push(sample);
    }
    combine_groups(tokens, &groups)
}

/// Builds the output batch: protected tokens, then one token per group (a list
/// of absolute indices, averaged by size in ascending index order), then the
/// fused tail if present.
pub(crate) fn combine_groups(tokens: &TokenBatch, groups: &[Vec<Vec<usize>>]) -> Result<TokenBatch> {
    let p = tokens.protected();
    let dim = tokens.dim();
    let tail = tokens.fused_tail();
    let len = p + groups.first().map_or(0, Vec::len) + usize::from(tail);
    let mut features = Vec::with_capacity(tokens.batch() * len * dim);
    let mut sizes = Vec::with_capacity(tokens.batch() * len);
    let mut provenance = Vec::with_capacity(tokens.batch() * len);
    for (b, sample) in groups.iter().enumerate() {
        if p + sample.len() + usize::from(tail) != len {
            return Err(Error::InconsistentPlan("samples reduce to different lengths"));
        }
        for i in 0..p {
            features.extend_from_slice(tokens.token(b, i));
            sizes.push(tokens.size(b, i));
            provenance.push(tokens.provenance(b, i).to_vec());
        }
        for group in sample {
            if group.len() == 1 {
                let i = group[0];
                features.extend_from_slice(tokens.token(b, i));
                sizes.push(tokens.size(b, i));
                provenance.push(tokens.provenance(b, i).to_vec());
                continue;
            }
            let mut acc = vec![0.0; dim];
            let mut total = 0.0;
            let mut cells = Vec::new();
            for &i in group {
                let s = tokens.size(b, i);
                for (a, &x) in acc.iter_mut().zip(tokens.token(b, i)) {
                    *a += s * x;
                }
                total += s;
                cells.extend_from_slice(tokens.provenance(b, i));
            }
            acc.iter_mut().for_each(|a| *a /= total);
            cells.sort_unstable();
            features.extend_from_slice(&acc);
            sizes.push(total);
            provenance.push(cells);
        }
        if tail {
            let i = tokens.len() - 1;
            features.extend_from_slice(tokens.token(b, i));
            sizes.push(tokens.size(b, i));
            provenance.push(tokens.provenance(b, i).to_vec());
        }
    }
    TokenBatch::from_parts(tokens.batch(), len, dim, p, features, sizes, provenance, tail)
}

/// Similarity, selection, destination resolution and merge in one step.
pub fn mat_reduce(
    tokens: &TokenBatch,
    keys: Option<&KeyTensor>,
    cfg: SimilarityConfig,
    r: usize,
) -> Result<(TokenBatch, Vec<MergePlan>)> {
    if r == 0 {
        let plans = vec![MergePlan::default(); tokens.batch()];
        return Ok((tokens.clone(), plans));
    }
    let scores = adjacent_similarity(tokens, keys, cfg)?;
    let plans = scores
        .into_iter()
        .map(|s| plan_merge(s, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((merge(tokens, &plans)?, plans))
}

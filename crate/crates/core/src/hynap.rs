//! Pruning followed by importance-grouped bipartite soft matching.
//!
//! A hybrid layer scores tokens with the neighbor-aware importance, fuses the
//! `prune_count` lowest-scoring tokens into one, then ranks the survivors by the
//! same score and alternates them into two sets. Every token of set A links to
//! its most similar token of set B (cosine over head-averaged keys) and the
//! `merge_count` strongest links are merged.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mat::{combine_groups, cosine, mergeable, similarity_feature, SimilarityFeature};
use crate::nap::{build_kernel, prunable, prune_to, score_tokens, ImportanceVector, NapConfig, PrunePlan};
use crate::select::{rank_desc, top_k_desc};
use crate::tokens::TokenBatch;
use crate::vit::{AttentionMap, KeyTensor};

/// Per-layer `(prune_count, merge_count)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HybridSchedule {
    pub entries: Vec<(usize, usize)>,
}

impl HybridSchedule {
    pub fn constant(depth: usize, prune: usize, merge: usize) -> Self {
        Self {
            entries: vec![(prune, merge); depth],
        }
    }

    /// Token count after every layer, starting from `tokens` tokens with
    /// `protected` of them protected and no fused token. Fails on the first
    /// layer whose entry cannot be applied.
    pub fn token_counts(&self, tokens: usize, protected: usize) -> Result<Vec<usize>> {
        let mut t = tokens;
        let mut fused = false;
        let mut out = Vec::with_capacity(self.entries.len());
        for &(prune, merge) in &self.entries {
            t = layer_count(t, protected, fused, prune, merge)?;
            fused |= prune > 0;
            out.push(t);
        }
        Ok(out)
    }
}

/// Closed-form output count of one hybrid layer, validating the entry.
pub fn layer_count(tokens: usize, protected: usize, fused: bool, prune: usize, merge: usize) -> Result<usize> {
    if prune + merge >= tokens {
        return Err(Error::InvalidArgument("prune + merge must stay below the token count"));
    }
    let candidates = tokens - protected - usize::from(fused);
    if prune > candidates {
        return Err(Error::InvalidArgument("prune count exceeds the prunable tokens"));
    }
    let m = candidates - prune;
    if merge > 0 && 2 * merge >= m {
        return Err(Error::InvalidArgument("merge count must stay below half the mergeable tokens"));
    }
    Ok(tokens - prune - merge + usize::from(prune > 0 && !fused))
}

/// One sample's matching: `sources[k]` merges into `destinations[k]`
/// (indices into the batch the merge was applied to).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BsmPlan {
    pub sources: Vec<usize>,
    pub destinations: Vec<usize>,
}

/// Bipartite soft matching with the sets alternating in sequence order.
pub fn bsm_merge(tokens: &TokenBatch, keys: &KeyTensor, r: usize) -> Result<(TokenBatch, Vec<BsmPlan>)> {
    bsm_merge_ranked(tokens, keys, r, None)
}

/// Bipartite soft matching. With `ranking` (one score per mergeable token and
/// sample), tokens are split by alternating rank of descending score instead of
/// sequence position.
pub fn bsm_merge_ranked(
    tokens: &TokenBatch,
    keys: &KeyTensor,
    r: usize,
    ranking: Option<&[Vec<f64>]>,
) -> Result<(TokenBatch, Vec<BsmPlan>)> {
    let m = mergeable(tokens);
    if r > 0 && 2 * r >= m {
        return Err(Error::InvalidArgument("merge count must stay below half the mergeable tokens"));
    }
    if r == 0 {
        return Ok((tokens.clone(), vec![BsmPlan::default(); tokens.batch()]));
    }
    let p = tokens.protected();
    let mut groups = Vec::with_capacity(tokens.batch());
    let mut plans = Vec::with_capacity(tokens.batch());
    for b in 0..tokens.batch() {
        let order: Vec<usize> = match ranking {
            Some(scores) => {
                let row = scores.get(b).ok_or(Error::ShapeMismatch("ranking batch", tokens.batch(), scores.len()))?;
                if row.len() != m {
                    return Err(Error::ShapeMismatch("ranking length", m, row.len()));
                }
                rank_desc(row)
            }
            None => (0..m).collect(),
        };
        let mut set_a: Vec<usize> = order.iter().step_by(2).map(|&j| p + j).collect();
        let mut set_b: Vec<usize> = order.iter().skip(1).step_by(2).map(|&j| p + j).collect();
        set_a.sort_unstable();
        set_b.sort_unstable();

        let feats = (p..p + m)
            .map(|i| similarity_feature(tokens, Some(keys), SimilarityFeature::KMean, b, i))
            .collect::<Result<Vec<_>>>()?;
        let mut best_score = Vec::with_capacity(set_a.len());
        let mut best_dst = Vec::with_capacity(set_a.len());
        for &a in &set_a {
            let mut best = (f64::NEG_INFINITY, set_b[0]);
            for &bb in &set_b {
                let s = cosine(&feats[a - p], &feats[bb - p]);
                if s > best.0 {
                    best = (s, bb);
                }
            }
            best_score.push(best.0);
            best_dst.push(best.1);
        }
        let chosen = top_k_desc(&best_score, r);
        let mut plan = BsmPlan::default();
        let mut absorbed: Vec<Vec<usize>> = vec![Vec::new(); tokens.len()];
        let mut is_source = vec![false; tokens.len()];
        for &k in &chosen {
            plan.sources.push(set_a[k]);
            plan.destinations.push(best_dst[k]);
            absorbed[best_dst[k]].push(set_a[k]);
            is_source[set_a[k]] = true;
        }
        let sample: Vec<Vec<usize>> = (p..p + m)
            .filter(|&i| !is_source[i])
            .map(|i| {
                let mut g = vec![i];
                g.extend_from_slice(&absorbed[i]);
                g.sort_unstable();
                g
            })
            .collect();
        groups.push(sample);
        plans.push(plan);
    }
    Ok((combine_groups(tokens, &groups)?, plans))
}

/// Everything one hybrid layer decided.
#[derive(Debug, Clone, PartialEq)]
pub struct HynapTrace {
    pub importance: ImportanceVector,
    pub prune_plans: Option<Vec<PrunePlan>>,
    pub merge_plans: Vec<BsmPlan>,
}

/// Prune `entry.0` tokens by importance, then merge `entry.1` more with
/// importance-grouped bipartite matching.
pub fn hynap_layer(
    tokens: &TokenBatch,
    attn: &AttentionMap,
    keys: &KeyTensor,
    entry: (usize, usize),
    nap: &NapConfig,
) -> Result<(TokenBatch, HynapTrace)> {
    let (prune, merge) = entry;
    layer_count(tokens.len(), tokens.protected(), tokens.fused_tail(), prune, merge)?;
    if attn.tokens() != tokens.len() || keys.tokens() != tokens.len() {
        return Err(Error::ShapeMismatch("attention tokens", tokens.len(), attn.tokens()));
    }
    let importance = score_tokens(attn, &build_kernel(nap.radius), nap.alpha)?;
    let p = tokens.protected();

    let (pruned, prune_plans) = if prune > 0 {
        let candidates = prunable(tokens);
        let keep = candidates - prune;
        let (out, plans) = prune_to(tokens, &importance.xi, keep, keep as f64 / candidates as f64, nap.fused_weighting)?;
        (out, Some(plans))
    } else {
        (tokens.clone(), None)
    };

    if merge == 0 {
        return Ok((
            pruned,
            HynapTrace {
                importance,
                prune_plans,
                merge_plans: vec![BsmPlan::default(); tokens.batch()],
            },
        ));
    }

    // map every position of the pruned batch back to the input batch
    let origin: Vec<Vec<Option<usize>>> = (0..tokens.batch())
        .map(|b| match &prune_plans {
            Some(plans) => (0..p)
                .map(Some)
                .chain(plans[b].keep_indices.iter().map(|&i| Some(i)))
                .chain(core::iter::once(None))
                .collect(),
            None => (0..tokens.len()).map(Some).collect(),
        })
        .collect();
    let sub_keys = keys.gather(&origin)?;
    let m = mergeable(&pruned);
    let ranking: Vec<Vec<f64>> = origin
        .iter()
        .enumerate()
        .map(|(b, o)| o[p..p + m].iter().map(|i| importance.xi[b][i.expect("kept token") - 1]).collect())
        .collect();
    let (merged, merge_plans) = bsm_merge_ranked(&pruned, &sub_keys, merge, Some(&ranking))?;
    Ok((
        merged,
        HynapTrace {
            importance,
            prune_plans,
            merge_plans,
        },
    ))
}

//! Batched token sequences with per-token size and provenance bookkeeping.

use alloc::vec;
use alloc::vec::Vec;

use crate::curve::CurveOrder;
use crate::error::{Error, Result};

/// `batch x len x dim` token features plus the bookkeeping the reduction
/// kernels need.
///
/// The first `protected` tokens of every sample (class/distill tokens) are never
/// pruned or merged. `sizes` counts how many original patches a token stands for,
/// and `provenance` lists those patches as row-major grid-cell indices. When
/// `fused_tail` is set, the last token of every sample is the representative
/// produced by a previous pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    batch: usize,
    len: usize,
    dim: usize,
    protected: usize,
    features: Vec<f64>,
    sizes: Vec<f64>,
    provenance: Vec<Vec<u32>>,
    fused_tail: bool,
}

impl TokenBatch {
    /// Fresh batch: sizes are 1, protected tokens have empty provenance and the
    /// token at position `protected + i` owns grid cell `i`.
    pub fn new(batch: usize, len: usize, dim: usize, protected: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != batch * len * dim {
            return Err(Error::ShapeMismatch("token features", batch * len * dim, features.len()));
        }
        if protected > len {
            return Err(Error::InvalidArgument("more protected tokens than tokens"));
        }
        let mut provenance = Vec::with_capacity(batch * len);
        for _ in 0..batch {
            for i in 0..len {
                provenance.push(if i < protected { Vec::new() } else { vec![(i - protected) as u32] });
            }
        }
        Ok(Self {
            batch,
            len,
            dim,
            protected,
            features,
            sizes: vec![1.0; batch * len],
            provenance,
            fused_tail: false,
        })
    }

    /// Assembles a batch from explicit parts, checking the shape contract.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        batch: usize,
        len: usize,
        dim: usize,
        protected: usize,
        features: Vec<f64>,
        sizes: Vec<f64>,
        provenance: Vec<Vec<u32>>,
        fused_tail: bool,
    ) -> Result<Self> {
        if features.len() != batch * len * dim {
            return Err(Error::ShapeMismatch("token features", batch * len * dim, features.len()));
        }
        if sizes.len() != batch * len {
            return Err(Error::ShapeMismatch("token sizes", batch * len, sizes.len()));
        }
        if provenance.len() != batch * len {
            return Err(Error::ShapeMismatch("token provenance", batch * len, provenance.len()));
        }
        if protected + usize::from(fused_tail) > len {
            return Err(Error::InvalidArgument("more protected tokens than tokens"));
        }
        Ok(Self {
            batch,
            len,
            dim,
            protected,
            features,
            sizes,
            provenance,
            fused_tail,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Tokens per sample (T).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn protected(&self) -> usize {
        self.protected
    }

    pub fn fused_tail(&self) -> bool {
        self.fused_tail
    }

    /// Non-protected tokens per sample.
    pub fn unprotected(&self) -> usize {
        self.len - self.protected
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.len * self.dim;
        &self.features[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn token(&self, b: usize, i: usize) -> &[f64] {
        let off = (b * self.len + i) * self.dim;
        &self.features[off..off + self.dim]
    }

    #[inline]
    pub fn token_mut(&mut self, b: usize, i: usize) -> &mut [f64] {
        let off = (b * self.len + i) * self.dim;
        &mut self.features[off..off + self.dim]
    }

    #[inline]
    pub fn size(&self, b: usize, i: usize) -> f64 {
        self.sizes[b * self.len + i]
    }

    pub fn sample_sizes(&self, b: usize) -> &[f64] {
        &self.sizes[b * self.len..(b + 1) * self.len]
    }

    #[inline]
    pub fn provenance(&self, b: usize, i: usize) -> &[u32] {
        &self.provenance[b * self.len + i]
    }

    pub fn sample_provenance(&self, b: usize) -> &[Vec<u32>] {
        &self.provenance[b * self.len..(b + 1) * self.len]
    }

    /// Ordering key that does not depend on where a token sits in the sequence:
    /// protected tokens by position, everything else by its smallest grid cell.
    pub fn canonical_key(&self, b: usize, i: usize) -> (u8, u64) {
        if i < self.protected {
            (0, i as u64)
        } else {
            let cell = self.provenance(b, i).iter().copied().min().map_or(u64::MAX, u64::from);
            (1, cell)
        }
    }

    /// Sum of sizes over the non-protected tokens of sample `b`.
    pub fn total_size(&self, b: usize) -> f64 {
        self.sample_sizes(b)[self.protected..].iter().sum()
    }

    /// Size-weighted feature sum over the non-protected tokens of sample `b`.
    pub fn weighted_feature_sum(&self, b: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for i in self.protected..self.len {
            let s = self.size(b, i);
            for (a, &x) in acc.iter_mut().zip(self.token(b, i)) {
                *a += s * x;
            }
        }
        acc
    }

    /// Builds a new batch whose sample `b` takes its tokens from `sources[b]`
    /// (indices into the current sample), in that order. All samples must select
    /// the same number of tokens.
    pub fn gather(&self, sources: &[Vec<usize>], protected: usize, fused_tail: bool) -> Result<TokenBatch> {
        if sources.len() != self.batch {
            return Err(Error::ShapeMismatch("gather batch", self.batch, sources.len()));
        }
        let len = sources.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(self.batch * len * self.dim);
        let mut sizes = Vec::with_capacity(self.batch * len);
        let mut provenance = Vec::with_capacity(self.batch * len);
        for (b, src) in sources.iter().enumerate() {
            if src.len() != len {
                return Err(Error::ShapeMismatch("gather length", len, src.len()));
            }
            for &i in src {
                if i >= self.len {
                    return Err(Error::InvalidArgument("gather index out of range"));
                }
                features.extend_from_slice(self.token(b, i));
                sizes.push(self.size(b, i));
                provenance.push(self.provenance(b, i).to_vec());
            }
        }
        TokenBatch::from_parts(self.batch, len, self.dim, protected, features, sizes, provenance, fused_tail)
    }

    /// Checks size and provenance bookkeeping against a grid of `cells` patches:
    /// sizes are at least 1, provenance sets of non-protected tokens partition
    /// `0..cells`, and each token's size equals its provenance count.
    pub fn check_bookkeeping(&self, cells: usize) -> Result<()> {
        for b in 0..self.batch {
            let mut seen = vec![false; cells];
            for i in 0..self.len {
                let s = self.size(b, i);
                if s < 1.0 {
                    return Err(Error::InconsistentPlan("token size below 1"));
                }
                if i < self.protected {
                    continue;
                }
                let prov = self.provenance(b, i);
                if prov.len() as f64 != s {
                    return Err(Error::InconsistentPlan("size differs from provenance count"));
                }
                for &c in prov {
                    let c = c as usize;
                    if c >= cells || seen[c] {
                        return Err(Error::InconsistentPlan("provenance is not a partition"));
                    }
                    seen[c] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::InconsistentPlan("provenance does not cover the grid"));
            }
        }
        Ok(())
    }
}

/// Moves each non-protected token from its row-major grid slot to its position
/// along `order`. Protected tokens stay in front.
pub fn reorder_tokens(tokens: &TokenBatch, order: &CurveOrder) -> Result<TokenBatch> {
    check_order(tokens, order)?;
    let p = tokens.protected();
    // sequence position k takes the token laid out at cell perm[k]
    let src: Vec<usize> = (0..p).chain(order.linear_perm().into_iter().map(|c| p + c)).collect();
    tokens.gather(&vec![src; tokens.batch()], p, false)
}

/// Inverse of [`reorder_tokens`]: returns tokens laid out along `order` to
/// row-major grid layout.
pub fn restore_tokens(tokens: &TokenBatch, order: &CurveOrder) -> Result<TokenBatch> {
    check_order(tokens, order)?;
    let p = tokens.protected();
    let src: Vec<usize> = (0..p).chain(order.inverse().iter().map(|&k| p + k)).collect();
    tokens.gather(&vec![src; tokens.batch()], p, false)
}

fn check_order(tokens: &TokenBatch, order: &CurveOrder) -> Result<()> {
    if tokens.fused_tail() {
        return Err(Error::InvalidArgument("cannot reorder a batch holding a fused token"));
    }
    if tokens.unprotected() != order.len() {
        return Err(Error::ShapeMismatch("curve order length", order.len(), tokens.unprotected()));
    }
    Ok(())
}

//! Analytic FLOPs for a ViT forward pass under a token schedule.
//!
//! Convention: one multiply-add counts as one FLOP. Per block with `N` tokens
//! and width `C`:
//!
//! * attention: `4 N C^2` (q, k, v and output projections) + `2 N^2 C`
//!   (scores and weighted values),
//! * MLP: `2 N C H` with hidden width `H` (`8 N C^2` at ratio 4).
//!
//! Patch embedding and the classifier head are included; layer norms, softmax
//! and GELU are not. A reduction step sits between attention and MLP, so a
//! reducing layer pays attention at its input count and MLP at its output count.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hynap::HybridSchedule;
use crate::select::ceil_count;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub depth: usize,
    pub dim: u64,
    pub heads: u64,
    pub mlp_ratio: f64,
    pub patch: u64,
    pub resolution: u64,
    pub in_chans: u64,
    pub num_classes: u64,
    pub protected: u64,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(name: &str, depth: usize, dim: u64, heads: u64, mlp_ratio: f64, patch: u64, resolution: u64) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            depth,
            dim,
            heads,
            mlp_ratio,
            patch,
            resolution,
            in_chans: 3,
            num_classes: 1000,
            protected: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 || self.resolution == 0 {
            return Err(Error::Config("model fields must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config("dim must be divisible by heads"));
        }
        if !self.resolution.is_multiple_of(self.patch) {
            return Err(Error::Config("resolution must be divisible by patch"));
        }
        if self.mlp_ratio.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return Err(Error::Config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn deit_s() -> Self {
        Self::new("deit-s", 12, 384, 6, 4.0, 16, 224).expect("preset")
    }

    pub fn deit_b() -> Self {
        Self::new("deit-b", 12, 768, 12, 4.0, 16, 224).expect("preset")
    }

    pub fn deit_b_384() -> Self {
        Self::new("deit-b-384", 12, 768, 12, 4.0, 16, 384).expect("preset")
    }

    /// ViT-B/16 at 224 (the MAE backbone); same shape as DeiT-B.
    pub fn vit_b() -> Self {
        Self::new("vit-b", 12, 768, 12, 4.0, 16, 224).expect("preset")
    }

    pub fn vit_l() -> Self {
        Self::new("vit-l", 24, 1024, 16, 4.0, 16, 224).expect("preset")
    }

    pub fn presets() -> Vec<ModelSpec> {
        alloc::vec![Self::deit_s(), Self::deit_b(), Self::deit_b_384(), Self::vit_b(), Self::vit_l()]
    }

    pub fn preset(name: &str) -> Option<ModelSpec> {
        let key = name.to_ascii_lowercase().replace(['/', '_'], "-");
        let key = key.trim_end_matches("-224");
        Self::presets().into_iter().find(|p| p.name == key)
    }

    pub fn hidden(&self) -> u64 {
        libm::round(self.mlp_ratio * self.dim as f64) as u64
    }

    pub fn patches(&self) -> u64 {
        let side = self.resolution / self.patch;
        side * side
    }

    /// Tokens entering the first block.
    pub fn tokens(&self) -> u64 {
        self.patches() + self.protected
    }
}

pub fn attention_flops(n: u64, spec: &ModelSpec) -> u64 {
    let c = spec.dim;
    4 * n * c * c + 2 * n * n * c
}

pub fn mlp_flops(n: u64, spec: &ModelSpec) -> u64 {
    2 * n * spec.dim * spec.hidden()
}

/// One unreduced block at `n` tokens: `12 N C^2 + 2 N^2 C` at MLP ratio 4.
pub fn block_flops(n: u64, spec: &ModelSpec) -> u64 {
    attention_flops(n, spec) + mlp_flops(n, spec)
}

pub fn embed_flops(spec: &ModelSpec) -> u64 {
    spec.patches() * spec.patch * spec.patch * spec.in_chans * spec.dim
}

pub fn head_flops(spec: &ModelSpec) -> u64 {
    spec.dim * spec.num_classes
}

/// Token counts: `initial` enters block 0, `counts[l]` leaves block `l`'s
/// reduction step (and feeds its MLP and the next block).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSchedule {
    pub initial: u64,
    pub counts: Vec<u64>,
}

impl TokenSchedule {
    pub fn constant(spec: &ModelSpec) -> Self {
        Self {
            initial: spec.tokens(),
            counts: alloc::vec![spec.tokens(); spec.depth],
        }
    }

    /// Pruning at `layers` keeping `ceil(keep_ratio * m)` of the `m` image
    /// tokens; one fused token is carried after the first pruning layer.
    pub fn nap(spec: &ModelSpec, keep_ratio: f64, layers: &[usize]) -> Result<Self> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::InvalidArgument("keep_ratio must lie in (0, 1]"));
        }
        let mut m = spec.patches() as usize;
        let mut fused = 0;
        let mut counts = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            if layers.contains(&l) {
                let keep = ceil_count(keep_ratio, m);
                if keep < m {
                    fused = 1;
                }
                m = keep;
            }
            counts.push(spec.protected + m as u64 + fused);
        }
        Ok(Self {
            initial: spec.tokens(),
            counts,
        })
    }

    /// Merging `r` tokens in every block, capped by the available adjacent pairs.
    pub fn mat(spec: &ModelSpec, r: u64) -> Self {
        let mut t = spec.tokens();
        let counts = (0..spec.depth)
            .map(|_| {
                let pairs = t.saturating_sub(spec.protected + 1);
                t -= r.min(pairs);
                t
            })
            .collect();
        Self {
            initial: spec.tokens(),
            counts,
        }
    }

    pub fn hybrid(spec: &ModelSpec, schedule: &HybridSchedule) -> Result<Self> {
        if schedule.entries.len() != spec.depth {
            return Err(Error::ShapeMismatch("hybrid schedule length", spec.depth, schedule.entries.len()));
        }
        let counts = schedule.token_counts(spec.tokens() as usize, spec.protected as usize)?;
        Ok(Self {
            initial: spec.tokens(),
            counts: counts.into_iter().map(|c| c as u64).collect(),
        })
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.counts.len() != spec.depth {
            return Err(Error::ShapeMismatch("schedule length", spec.depth, self.counts.len()));
        }
        let mut prev = self.initial;
        for &n in &self.counts {
            if n > prev {
                return Err(Error::InvalidArgument("token schedule must be non-increasing"));
            }
            if n < 1 + spec.protected {
                return Err(Error::InvalidArgument("token schedule drops below one image token"));
            }
            prev = n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub total: u64,
    pub embed: u64,
    pub head: u64,
    pub per_layer: Vec<u64>,
}

pub fn schedule_flops(schedule: &TokenSchedule, spec: &ModelSpec) -> Result<FlopsBreakdown> {
    schedule.validate(spec)?;
    let mut prev = schedule.initial;
    let per_layer: Vec<u64> = schedule
        .counts
        .iter()
        .map(|&n| {
            let f = attention_flops(prev, spec) + mlp_flops(n, spec);
            prev = n;
            f
        })
        .collect();
    let (embed, head) = (embed_flops(spec), head_flops(spec));
    Ok(FlopsBreakdown {
        total: per_layer.iter().sum::<u64>() + embed + head,
        embed,
        head,
        per_layer,
    })
}

/// The constant merge count whose schedule lands closest to `target` FLOPs.
pub fn search_mat_r(spec: &ModelSpec, target: u64) -> (u64, u64) {
    (0..spec.tokens())
        .map(|r| {
            let f = schedule_flops(&TokenSchedule::mat(spec, r), spec).map_or(u64::MAX, |b| b.total);
            (r, f)
        })
        .min_by_key(|&(r, f)| (f.abs_diff(target), r))
        .expect("non-empty search range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_flops_at_one_token() {
        let s = ModelSpec::deit_s();
        assert_eq!(block_flops(1, &s), 12 * 384 * 384 + 2 * 384);
    }

    #[test]
    fn constant_schedule_is_plain_sum() {
        let s = ModelSpec::deit_s();
        let f = schedule_flops(&TokenSchedule::constant(&s), &s).unwrap();
        assert_eq!(f.total, 12 * block_flops(197, &s) + embed_flops(&s) + head_flops(&s));
    }

    #[test]
    fn nap_schedule_cascade() {
        let s = ModelSpec::deit_s();
        let sched = TokenSchedule::nap(&s, 0.7, &[3, 6, 9]).unwrap();
        assert_eq!(sched.counts, alloc::vec![197, 197, 197, 140, 140, 140, 99, 99, 99, 70, 70, 70]);
    }

    #[test]
    fn mat_schedule_counts() {
        let s = ModelSpec::deit_s();
        assert_eq!(*TokenSchedule::mat(&s, 8).counts.last().unwrap(), 197 - 96);
    }

    #[test]
    fn schedule_errors() {
        let s = ModelSpec::deit_s();
        let short = TokenSchedule {
            initial: 197,
            counts: alloc::vec![197; 3],
        };
        assert!(schedule_flops(&short, &s).is_err());
        let growing = TokenSchedule {
            initial: 197,
            counts: (0..12).map(|l| 150 + l).collect(),
        };
        assert!(schedule_flops(&growing, &s).is_err());
    }

    #[test]
    fn presets_resolve_by_name() {
        assert_eq!(ModelSpec::preset("DeiT-S/224").unwrap(), ModelSpec::deit_s());
        assert_eq!(ModelSpec::preset("deit-b-384").unwrap().tokens(), 577);
        assert!(ModelSpec::preset("swin").is_none());
    }
}

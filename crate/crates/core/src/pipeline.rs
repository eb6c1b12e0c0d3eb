//! Embed-reorder-reduce driver: curve reordering followed by `depth` blocks of
//! attention, an optional reduction step and MLP.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::curve::{build_order, CurveKind, CurveOrder, GridShape};
use crate::error::{Error, Result};
use crate::hynap::{hynap_layer, BsmPlan, HybridSchedule};
use crate::mat::{mat_reduce, mergeable, MergePlan, SimilarityConfig};
use crate::nap::{nap_layer, NapConfig, PrunePlan};
use crate::tokens::{reorder_tokens, TokenBatch};
use crate::vit::{attention_forward_with, mlp_forward_with, AttentionWeights, BlockConfig, MlpWeights};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatConfig {
    pub similarity: SimilarityConfig,
    pub r_per_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Method {
    #[default]
    None,
    Nap(NapConfig),
    Mat(MatConfig),
    Hynap { nap: NapConfig, schedule: HybridSchedule },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Nap(_) => "nap",
            Method::Mat(_) => "mat",
            Method::Hynap { .. } => "hynap",
        }
    }
}

/// Method names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    None,
    Nap,
    Mat,
    Hynap,
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MethodKind::None),
            "nap" => Ok(MethodKind::Nap),
            "mat" => Ok(MethodKind::Mat),
            "hynap" => Ok(MethodKind::Hynap),
            _ => Err(Error::Config("method must be none, nap, mat or hynap")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub block: BlockConfig,
    pub curve: CurveKind,
    pub method: Method,
}

/// What happened to a grid cell's token after a reduction layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fate {
    Kept,
    Merged,
    Pruned,
}

impl Fate {
    pub fn shade(self) -> u8 {
        match self {
            Fate::Kept => 255,
            Fate::Merged => 128,
            Fate::Pruned => 0,
        }
    }
}

impl fmt::Display for Fate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fate::Kept => "kept",
            Fate::Merged => "merged",
            Fate::Pruned => "pruned",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDecision {
    None,
    Prune(Vec<PrunePlan>),
    Merge(Vec<MergePlan>),
    Hybrid {
        prune: Option<Vec<PrunePlan>>,
        merge: Vec<BsmPlan>,
    },
}

/// Nanosecond clock; the default pipeline runs without one.
pub trait Clock {
    fn now_ns(&mut self) -> u64;
}

pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&mut self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub decision: LayerDecision,
    /// Per sample, per row-major grid cell; empty for layers without reduction.
    pub fates: Vec<Vec<Fate>>,
    /// Per sample, the grid cells behind every output token; empty like `fates`.
    pub provenance: Vec<Vec<Vec<u32>>>,
    pub attention_ns: u64,
    pub reduction_ns: u64,
    pub mlp_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub grid: GridShape,
    pub order: CurveOrder,
    pub layers: Vec<LayerRecord>,
    pub output: TokenBatch,
    pub reorder_ns: u64,
}

/// Fate of every grid cell given the current tokens: cells in the fused tail
/// were pruned, cells sharing a token were merged, the rest are kept.
pub fn cell_fates(tokens: &TokenBatch, grid: GridShape) -> Vec<Vec<Fate>> {
    (0..tokens.batch())
        .map(|b| {
            let mut fates = vec![Fate::Kept; grid.len()];
            for i in tokens.protected()..tokens.len() {
                let prov = tokens.provenance(b, i);
                let fate = if tokens.fused_tail() && i + 1 == tokens.len() {
                    Fate::Pruned
                } else if prov.len() > 1 {
                    Fate::Merged
                } else {
                    Fate::Kept
                };
                for &c in prov {
                    fates[c as usize] = fate;
                }
            }
            fates
        })
        .collect()
}

pub fn run_pipeline(tokens: &TokenBatch, grid: GridShape, cfg: &PipelineConfig) -> Result<PipelineTrace> {
    run_pipeline_timed(tokens, grid, cfg, &mut NoClock)
}

/// Runs the pipeline on a row-major batch over `grid`.
pub fn run_pipeline_timed(
    tokens: &TokenBatch,
    grid: GridShape,
    cfg: &PipelineConfig,
    clock: &mut dyn Clock,
) -> Result<PipelineTrace> {
    let t0 = clock.now_ns();
    let order = build_order(grid, cfg.curve)?;
    let elapsed = clock.now_ns() - t0;
    let mut trace = run_pipeline_ordered(tokens, &order, cfg, clock)?;
    trace.reorder_ns += elapsed;
    Ok(trace)
}

/// Runs the pipeline with a prebuilt order; `cfg.curve` is ignored.
pub fn run_pipeline_ordered(
    tokens: &TokenBatch,
    order: &CurveOrder,
    cfg: &PipelineConfig,
    clock: &mut dyn Clock,
) -> Result<PipelineTrace> {
    let grid = order.shape();
    cfg.block.validate()?;
    if let Method::Hynap { schedule, .. } = &cfg.method {
        if schedule.entries.len() != cfg.block.depth {
            return Err(Error::ShapeMismatch("hybrid schedule length", cfg.block.depth, schedule.entries.len()));
        }
    }
    if let Method::Nap(nap) = &cfg.method {
        nap.validate()?;
    }
    let t0 = clock.now_ns();
    let mut x = reorder_tokens(tokens, order)?;
    let reorder_ns = clock.now_ns() - t0;

    let mut layers = Vec::with_capacity(cfg.block.depth);
    for layer in 0..cfg.block.depth {
        let tokens_in = x.len();
        let t0 = clock.now_ns();
        let (attended, attn, keys) = attention_forward_with(&x, &cfg.block, &AttentionWeights::generate(&cfg.block, layer))?;
        let t1 = clock.now_ns();
        let (reduced, decision) = match &cfg.method {
            Method::None => (attended, LayerDecision::None),
            Method::Nap(nap) if nap.layers.contains(&layer) => {
                let (out, _, plans) = nap_layer(&attended, &attn, nap)?;
                (out, LayerDecision::Prune(plans))
            }
            Method::Nap(_) => (attended, LayerDecision::None),
            Method::Mat(mat) => {
                let r = mat.r_per_layer.min(mergeable(&attended).saturating_sub(1));
                if r == 0 {
                    (attended, LayerDecision::None)
                } else {
                    let (out, plans) = mat_reduce(&attended, Some(&keys), mat.similarity, r)?;
                    (out, LayerDecision::Merge(plans))
                }
            }
            Method::Hynap { nap, schedule } => {
                let entry = schedule.entries[layer];
                if entry == (0, 0) {
                    (attended, LayerDecision::None)
                } else {
                    let (out, trace) = hynap_layer(&attended, &attn, &keys, entry, nap)?;
                    (
                        out,
                        LayerDecision::Hybrid {
                            prune: trace.prune_plans,
                            merge: trace.merge_plans,
                        },
                    )
                }
            }
        };
        let t2 = clock.now_ns();
        x = mlp_forward_with(&reduced, &cfg.block, &MlpWeights::generate(&cfg.block, layer))?;
        let t3 = clock.now_ns();
        let (fates, provenance) = if matches!(decision, LayerDecision::None) {
            (Vec::new(), Vec::new())
        } else {
            (cell_fates(&x, grid), (0..x.batch()).map(|b| x.sample_provenance(b).to_vec()).collect())
        };
        layers.push(LayerRecord {
            layer,
            tokens_in,
            tokens_out: x.len(),
            decision,
            fates,
            provenance,
            attention_ns: t1 - t0,
            reduction_ns: t2 - t1,
            mlp_ns: t3 - t2,
        });
    }
    Ok(PipelineTrace {
        grid,
        order: order.clone(),
        layers,
        output: x,
        reorder_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::synthetic_batch;

    fn cfg(method: Method) -> PipelineConfig {
        PipelineConfig {
            block: BlockConfig {
                dim: 16,
                heads: 2,
                depth: 4,
                seed: 3,
                ..BlockConfig::default()
            },
            curve: CurveKind::Hilbert,
            method,
        }
    }

    #[test]
    fn no_reduction_keeps_counts() {
        let grid = GridShape::new(4, 4).unwrap();
        let t = synthetic_batch(1, grid, 16, 1, 1).unwrap();
        let trace = run_pipeline(&t, grid, &cfg(Method::None)).unwrap();
        assert!(trace.layers.iter().all(|l| l.tokens_out == 17 && l.fates.is_empty()));
    }

    #[test]
    fn mat_removes_r_per_layer_and_reports_fates() {
        let grid = GridShape::new(4, 4).unwrap();
        let t = synthetic_batch(2, grid, 16, 1, 1).unwrap();
        let method = Method::Mat(MatConfig {
            r_per_layer: 2,
            ..Default::default()
        });
        let trace = run_pipeline(&t, grid, &cfg(method)).unwrap();
        let counts: Vec<usize> = trace.layers.iter().map(|l| l.tokens_out).collect();
        assert_eq!(counts, vec![15, 13, 11, 9]);
        trace.output.check_bookkeeping(16).unwrap();
        let merged = trace.layers[3].fates[0].iter().filter(|f| **f == Fate::Merged).count();
        assert!(merged >= 9);
    }

    #[test]
    fn nap_prunes_on_configured_layers() {
        let grid = GridShape::new(4, 4).unwrap();
        let t = synthetic_batch(1, grid, 16, 1, 1).unwrap();
        let nap = NapConfig {
            layers: vec![1, 3],
            keep_ratio: 0.5,
            ..NapConfig::default()
        };
        let trace = run_pipeline(&t, grid, &cfg(Method::Nap(nap))).unwrap();
        let counts: Vec<usize> = trace.layers.iter().map(|l| l.tokens_out).collect();
        assert_eq!(counts, vec![17, 1 + 8 + 1, 10, 1 + 4 + 1]);
        assert_eq!(trace.layers[3].fates[0].iter().filter(|f| **f == Fate::Pruned).count(), 12);
    }

    #[test]
    fn hybrid_schedule_length_checked() {
        let grid = GridShape::new(4, 4).unwrap();
        let t = synthetic_batch(1, grid, 16, 1, 1).unwrap();
        let method = Method::Hynap {
            nap: NapConfig::default(),
            schedule: HybridSchedule::constant(2, 1, 1),
        };
        assert!(run_pipeline(&t, grid, &cfg(method)).is_err());
    }
}

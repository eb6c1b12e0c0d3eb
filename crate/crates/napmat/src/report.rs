//! JSON run report.

use std::collections::BTreeMap;

use napmat_core::flops::{attention_flops, head_flops, mlp_flops, ModelSpec};
use napmat_core::pipeline::{LayerDecision, LayerRecord, PipelineTrace};
use napmat_core::{locality_score, CurveOrder, GridShape};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: BTreeMap<String, String>,
    pub input: InputInfo,
    pub grid: [usize; 2],
    /// Tokens entering block 0, then the count after every block.
    pub token_counts: Vec<usize>,
    pub layers: Vec<LayerReport>,
    pub flops: FlopsReport,
    pub locality: Vec<LocalityEntry>,
    /// Sum of all output features, per sample.
    pub output_checksum: Vec<f64>,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub kind: String,
    pub names: Vec<String>,
    pub batch: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub decision: String,
    /// One entry per sample; empty when the layer did not reduce.
    pub samples: Vec<SampleDecision>,
}

/// Indices refer to the layer's input sequence; `provenance[i]` lists the
/// row-major grid cells represented by output token `i`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleDecision {
    pub kept: Vec<usize>,
    pub fused: Vec<usize>,
    /// `[source, destination]` pairs.
    pub merged: Vec<[usize; 2]>,
    pub provenance: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total: u64,
    pub embed: u64,
    pub head: u64,
    pub per_layer: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityEntry {
    pub radius: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub reorder_ns: u64,
    pub attention_ns: Vec<u64>,
    pub reduction_ns: Vec<u64>,
    pub mlp_ns: Vec<u64>,
    pub total_ns: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// The report with every wall-clock field cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

/// Per-sample decisions of one layer, with indices into the layer's input.
pub fn layer_samples(record: &LayerRecord, protected: usize) -> Vec<SampleDecision> {
    let (tokens_in, output_provenance) = (record.tokens_in, &record.provenance);
    let finish = |b: usize, fused: Vec<usize>, merged: Vec<[usize; 2]>| {
        let gone: Vec<usize> = fused.iter().copied().chain(merged.iter().map(|m| m[0])).collect();
        let kept = (0..tokens_in).filter(|i| !gone.contains(i)).collect();
        SampleDecision {
            kept,
            fused,
            merged,
            provenance: output_provenance.get(b).cloned().unwrap_or_default(),
        }
    };
    match &record.decision {
        LayerDecision::None => Vec::new(),
        LayerDecision::Prune(plans) => plans
            .iter()
            .enumerate()
            .map(|(b, plan)| finish(b, plan.fused_source_indices.clone(), Vec::new()))
            .collect(),
        LayerDecision::Merge(plans) => plans
            .iter()
            .enumerate()
            .map(|(b, plan)| {
                let merged = plan
                    .sources
                    .iter()
                    .zip(&plan.filled)
                    .map(|(&s, &d)| [s + protected, d + protected])
                    .collect();
                finish(b, Vec::new(), merged)
            })
            .collect(),
        LayerDecision::Hybrid { prune, merge } => (0..merge.len())
            .map(|b| {
                // positions of the pruned sequence, as input indices
                let (fused, origin): (Vec<usize>, Vec<usize>) = match prune {
                    Some(plans) => {
                        let p = &plans[b];
                        let origin = (0..protected).chain(p.keep_indices.iter().copied()).collect();
                        (p.fused_source_indices.clone(), origin)
                    }
                    None => (Vec::new(), (0..tokens_in).collect()),
                };
                let merged = merge[b]
                    .sources
                    .iter()
                    .zip(&merge[b].destinations)
                    .map(|(&s, &d)| [origin[s], origin[d]])
                    .collect();
                finish(b, fused, merged)
            })
            .collect(),
    }
}

pub fn decision_name(decision: &LayerDecision) -> &'static str {
    match decision {
        LayerDecision::None => "none",
        LayerDecision::Prune(_) => "prune",
        LayerDecision::Merge(_) => "merge",
        LayerDecision::Hybrid { .. } => "hybrid",
    }
}

/// Analytic FLOPs for one sample of the traced run. `channels` is 0 for
/// synthetic input, which skips the patch embedding.
pub fn trace_flops(trace: &PipelineTrace, spec: &ModelSpec, channels: usize) -> FlopsReport {
    let mut prev = trace.layers.first().map_or(0, |l| l.tokens_in) as u64;
    let per_layer: Vec<u64> = trace
        .layers
        .iter()
        .map(|l| {
            let f = attention_flops(prev, spec) + mlp_flops(l.tokens_out as u64, spec);
            prev = l.tokens_out as u64;
            f
        })
        .collect();
    let embed = (trace.grid.len() as u64) * spec.patch * spec.patch * channels as u64 * spec.dim;
    let head = head_flops(spec);
    FlopsReport {
        total: per_layer.iter().sum::<u64>() + embed + head,
        embed,
        head,
        per_layer,
    }
}

/// Locality of `order` at radii 1..=4 (those below the grid size).
pub fn locality_table(order: &CurveOrder) -> Vec<LocalityEntry> {
    (1..=4)
        .filter(|&r| r < order.len())
        .map(|radius| LocalityEntry {
            radius,
            score: locality_score(order, radius).expect("radius in range"),
        })
        .collect()
}

pub fn grid_pair(grid: GridShape) -> [usize; 2] {
    [grid.rows, grid.cols]
}

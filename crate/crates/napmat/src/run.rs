//! Runs the pipeline on images or synthetic tokens and assembles a [`RunReport`].

use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use napmat_core::flops::ModelSpec;
use napmat_core::pipeline::{run_pipeline_ordered, Clock, LayerDecision, LayerRecord, PipelineTrace};
use napmat_core::vit::{embed_batch, synthetic_batch, Raster};
use napmat_core::{GridShape, TokenBatch};

use crate::cache;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::netpbm;
use crate::report::{decision_name, grid_pair, layer_samples, locality_table, trace_flops, InputInfo, LayerReport, RunReport, Timing, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    /// A PPM/PGM file or a directory of them.
    Images(PathBuf),
    Synthetic { grid: GridShape, batch: usize },
}

/// Monotonic wall clock for stage timings.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ns(&mut self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub trace: PipelineTrace,
    /// `(file name, image)` per reduction layer and sample.
    pub renders: Vec<(String, Raster)>,
}

/// Reads one image or every image in a directory.
pub fn load_images(path: &Path) -> Result<Vec<(String, Raster)>> {
    let images = if path.is_dir() {
        netpbm::read_dir(path)?
    } else {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(name, netpbm::read(path)?)]
    };
    if images.is_empty() {
        return Err(CliError::Input(format!("{}: no .ppm or .pgm images", path.display())));
    }
    Ok(images)
}

/// Inserts zero tokens after the class token until `protected` tokens lead.
fn extend_protected(tokens: &TokenBatch, protected: usize) -> Result<TokenBatch> {
    let extra = protected.saturating_sub(tokens.protected());
    if extra == 0 {
        return Ok(tokens.clone());
    }
    let (len, dim) = (tokens.len() + extra, tokens.dim());
    let mut features = Vec::with_capacity(tokens.batch() * len * dim);
    for b in 0..tokens.batch() {
        features.extend_from_slice(tokens.token(b, 0));
        features.extend(std::iter::repeat_n(0.0, extra * dim));
        for i in 1..tokens.len() {
            features.extend_from_slice(tokens.token(b, i));
        }
    }
    Ok(TokenBatch::new(tokens.batch(), len, dim, protected, features)?)
}

/// Samples `range` of `tokens` as their own batch.
fn slice_batch(tokens: &TokenBatch, range: std::ops::Range<usize>) -> Result<TokenBatch> {
    let (len, dim) = (tokens.len(), tokens.dim());
    let features = tokens.features()[range.start * len * dim..range.end * len * dim].to_vec();
    let sizes = tokens.sizes()[range.start * len..range.end * len].to_vec();
    let provenance = range.clone().flat_map(|b| tokens.sample_provenance(b).to_vec()).collect();
    Ok(TokenBatch::from_parts(
        range.len(),
        len,
        dim,
        tokens.protected(),
        features,
        sizes,
        provenance,
        tokens.fused_tail(),
    )?)
}

fn concat_batches(parts: &[TokenBatch]) -> Result<TokenBatch> {
    let first = &parts[0];
    let batch = parts.iter().map(TokenBatch::batch).sum();
    let features = parts.iter().flat_map(|t| t.features().iter().copied()).collect();
    let sizes = parts.iter().flat_map(|t| t.sizes().iter().copied()).collect();
    let provenance = parts
        .iter()
        .flat_map(|t| (0..t.batch()).flat_map(move |b| t.sample_provenance(b).to_vec()))
        .collect();
    Ok(TokenBatch::from_parts(
        batch,
        first.len(),
        first.dim(),
        first.protected(),
        features,
        sizes,
        provenance,
        first.fused_tail(),
    )?)
}

fn concat_decisions(parts: Vec<LayerDecision>) -> LayerDecision {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or(LayerDecision::None);
    for next in iter {
        acc = match (acc, next) {
            (LayerDecision::Prune(mut a), LayerDecision::Prune(b)) => {
                a.extend(b);
                LayerDecision::Prune(a)
            }
            (LayerDecision::Merge(mut a), LayerDecision::Merge(b)) => {
                a.extend(b);
                LayerDecision::Merge(a)
            }
            (LayerDecision::Hybrid { prune: pa, merge: mut ma }, LayerDecision::Hybrid { prune: pb, merge: mb }) => {
                ma.extend(mb);
                let prune = match (pa, pb) {
                    (Some(mut a), Some(b)) => {
                        a.extend(b);
                        Some(a)
                    }
                    (a, _) => a,
                };
                LayerDecision::Hybrid { prune, merge: ma }
            }
            (a, _) => a,
        };
    }
    acc
}

/// Joins per-shard traces in shard order. Stage times are the slowest shard's.
fn join_traces(shards: Vec<PipelineTrace>) -> Result<PipelineTrace> {
    let outputs: Vec<TokenBatch> = shards.iter().map(|t| t.output.clone()).collect();
    let depth = shards[0].layers.len();
    let layers = (0..depth)
        .map(|l| {
            let recs: Vec<&LayerRecord> = shards.iter().map(|s| &s.layers[l]).collect();
            LayerRecord {
                layer: l,
                tokens_in: recs[0].tokens_in,
                tokens_out: recs[0].tokens_out,
                decision: concat_decisions(recs.iter().map(|r| r.decision.clone()).collect()),
                fates: recs.iter().flat_map(|r| r.fates.clone()).collect(),
                provenance: recs.iter().flat_map(|r| r.provenance.clone()).collect(),
                attention_ns: recs.iter().map(|r| r.attention_ns).max().unwrap_or(0),
                reduction_ns: recs.iter().map(|r| r.reduction_ns).max().unwrap_or(0),
                mlp_ns: recs.iter().map(|r| r.mlp_ns).max().unwrap_or(0),
            }
        })
        .collect();
    let first = &shards[0];
    Ok(PipelineTrace {
        grid: first.grid,
        order: first.order.clone(),
        layers,
        output: concat_batches(&outputs)?,
        reorder_ns: shards.iter().map(|s| s.reorder_ns).max().unwrap_or(0),
    })
}

/// Shade of every grid cell after each reducing layer, one image per sample.
pub fn render_layers(trace: &PipelineTrace, names: &[String]) -> Vec<(String, Raster)> {
    let grid = trace.grid;
    trace
        .layers
        .iter()
        .filter(|l| !l.fates.is_empty())
        .flat_map(|l| {
            l.fates.iter().enumerate().map(move |(b, fates)| {
                let stem = names.get(b).map_or_else(|| format!("sample{b}"), |n| n.rsplit_once('.').map_or(n.clone(), |(s, _)| s.to_string()));
                let data = fates.iter().map(|f| f.shade()).collect();
                let image = Raster::new(grid.cols, grid.rows, 1, data).expect("one pixel per cell");
                (format!("layer{:02}_{stem}.pgm", l.layer), image)
            })
        })
        .collect()
}

/// Embeds `input`, runs the configured pipeline across `threads` worker shards
/// and builds the report.
pub fn run(cfg: &RunConfig, input: &Input, threads: usize) -> Result<RunOutput> {
    let pipeline = cfg.pipeline()?;
    let start = Instant::now();
    let (tokens, grid, names, kind, channels) = match input {
        Input::Images(path) => {
            let loaded = load_images(path)?;
            let (names, mut images): (Vec<String>, Vec<Raster>) = loaded.into_iter().unzip();
            if images.iter().any(|i| i.channels != images[0].channels) {
                images = images.iter().map(Raster::to_rgb).collect();
            }
            let first = &images[0];
            if images.iter().any(|i| i.width != first.width || i.height != first.height) {
                return Err(CliError::Input("all images in a run must share one size".into()));
            }
            if first.width % cfg.patch != 0 || first.height % cfg.patch != 0 {
                return Err(CliError::Input(format!(
                    "image size {}x{} is not a multiple of the patch size {}",
                    first.width, first.height, cfg.patch
                )));
            }
            let channels = first.channels;
            let (tokens, grid) = embed_batch(&images, cfg.patch, cfg.dim, cfg.seed)?;
            (extend_protected(&tokens, cfg.protected)?, grid, names, "image", channels)
        }
        Input::Synthetic { grid, batch } => {
            if *batch == 0 {
                return Err(CliError::Input("synthetic batch must be positive".into()));
            }
            let tokens = synthetic_batch(*batch, *grid, cfg.dim, cfg.protected, cfg.seed)?;
            let names = (0..*batch).map(|b| format!("sample{b}")).collect();
            (tokens, *grid, names, "synthetic", 0)
        }
    };
    let order = cache::global().get(grid, pipeline.curve)?;

    let batch = tokens.batch();
    let shards = threads.clamp(1, batch);
    let per = batch.div_ceil(shards);
    let ranges: Vec<_> = (0..batch).step_by(per).map(|s| s..(s + per).min(batch)).collect();
    let traces: Vec<PipelineTrace> = thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|r| {
                let (tokens, order, pipeline) = (&tokens, &order, &pipeline);
                s.spawn(move || -> Result<PipelineTrace> {
                    let part = slice_batch(tokens, r.clone())?;
                    Ok(run_pipeline_ordered(&part, order, pipeline, &mut WallClock::new())?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let trace = join_traces(traces)?;

    let spec = ModelSpec {
        name: "run".into(),
        depth: cfg.depth,
        dim: cfg.dim as u64,
        heads: cfg.heads as u64,
        mlp_ratio: cfg.mlp_ratio,
        patch: cfg.patch as u64,
        resolution: (grid.rows * cfg.patch) as u64,
        in_chans: channels as u64,
        num_classes: 1000,
        protected: cfg.protected as u64,
    };
    let mut token_counts = vec![tokens.len()];
    token_counts.extend(trace.layers.iter().map(|l| l.tokens_out));
    let layers = trace
        .layers
        .iter()
        .map(|l| LayerReport {
            layer: l.layer,
            tokens_in: l.tokens_in,
            tokens_out: l.tokens_out,
            decision: decision_name(&l.decision).into(),
            samples: layer_samples(l, cfg.protected),
        })
        .collect();
    let output_checksum = (0..trace.output.batch()).map(|b| trace.output.sample(b).iter().sum()).collect();
    let renders = render_layers(&trace, &names);
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.echo(),
        input: InputInfo {
            kind: kind.into(),
            names,
            batch,
            channels,
        },
        grid: grid_pair(grid),
        token_counts,
        layers,
        flops: trace_flops(&trace, &spec, channels),
        locality: locality_table(&order),
        output_checksum,
        timing: Timing {
            reorder_ns: trace.reorder_ns,
            attention_ns: trace.layers.iter().map(|l| l.attention_ns).collect(),
            reduction_ns: trace.layers.iter().map(|l| l.reduction_ns).collect(),
            mlp_ns: trace.layers.iter().map(|l| l.mlp_ns).collect(),
            total_ns: start.elapsed().as_nanos() as u64,
        },
    };
    Ok(RunOutput { report, trace, renders })
}

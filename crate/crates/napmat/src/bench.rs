//! Micro-benchmarks of the reduction kernels and log-log scaling fits.

use std::hint::black_box;
use std::time::{Duration, Instant};

use napmat_core::hynap::bsm_merge;
use napmat_core::mat::{adjacent_similarity, cosine, mat_reduce, mergeable, SimilarityConfig, SimilarityFeature};
use napmat_core::nap::{build_kernel, neighbor_awareness, prune};
use napmat_core::vit::{synthetic_batch, KeyTensor};
use napmat_core::{GridShape, TokenBatch};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const KERNELS: [&str; 5] = ["mat_similarity", "all_pairs", "mat_merge", "nap_prune", "bsm_merge"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub tokens: Vec<usize>,
    pub dim: usize,
    pub r: usize,
    pub kernels: Vec<String>,
    /// Minimum measured time per sample.
    pub min_time: Duration,
    /// Samples per point; the median is reported.
    pub samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tokens: vec![256, 512, 1024, 2048, 4096, 8192],
            dim: 64,
            r: 16,
            kernels: KERNELS.iter().map(|k| k.to_string()).collect(),
            min_time: Duration::from_millis(20),
            samples: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub kernel: String,
    pub tokens: usize,
    pub dim: usize,
    pub r: usize,
    /// Similarity evaluations (or tokens touched) per call.
    pub ops: u64,
    pub ns_per_call: f64,
    pub ns_per_op: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub kernel: String,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub slopes: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn slope(&self, kernel: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.kernel == kernel).map(|s| s.slope)
    }
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, intercept)`.
pub fn loglog_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Median ns per call of `f`, after one warmup round.
pub fn time_call(mut f: impl FnMut(), min_time: Duration, samples: usize) -> f64 {
    let start = Instant::now();
    f();
    let once = start.elapsed().max(Duration::from_nanos(1));
    let iters = ((min_time.as_nanos() / once.as_nanos()).max(1)) as u32;
    let mut runs: Vec<f64> = (0..samples.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..iters {
                f();
            }
            t.elapsed().as_nanos() as f64 / iters as f64
        })
        .collect();
    runs.sort_by(f64::total_cmp);
    runs[runs.len() / 2]
}

/// Cosine over every pair of mergeable tokens; the quadratic reference for
/// [`adjacent_similarity`].
pub fn all_pairs_similarity(tokens: &TokenBatch) -> Vec<f64> {
    let (p, m) = (tokens.protected(), mergeable(tokens));
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in p..p + m {
        for j in i + 1..p + m {
            out.push(cosine(tokens.token(0, i), tokens.token(0, j)));
        }
    }
    out
}

/// Number of similarity evaluations (or tokens scored) of `kernel` per call.
pub fn op_count(kernel: &str, t: usize, protected: usize) -> u64 {
    let m = (t - protected) as u64;
    match kernel {
        "all_pairs" => m * (m - 1) / 2,
        "nap_prune" => t as u64,
        "bsm_merge" => m.div_ceil(2) * (m / 2),
        _ => m - 1,
    }
}

fn fake_attention_scores(t: usize) -> Vec<Vec<f64>> {
    vec![(0..t - 1).map(|i| ((i * 7919) % 1013) as f64 / 1013.0).collect()]
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let x_cfg = SimilarityConfig {
        feature: SimilarityFeature::X,
        ..SimilarityConfig::default()
    };
    let mut points = Vec::new();
    for &t in &cfg.tokens {
        let grid = GridShape::new(1, t - 1)?;
        let tokens = synthetic_batch(1, grid, cfg.dim, 1, cfg.seed)?;
        let keys = KeyTensor::from_data(1, 1, t, cfg.dim, tokens.features().to_vec())?;
        let r = cfg.r.min(mergeable(&tokens) / 2 - 1);
        for kernel in &cfg.kernels {
            let ns = match kernel.as_str() {
                "mat_similarity" => time_call(|| drop(black_box(adjacent_similarity(black_box(&tokens), None, x_cfg))), cfg.min_time, cfg.samples),
                "all_pairs" => time_call(|| drop(black_box(all_pairs_similarity(black_box(&tokens)))), cfg.min_time, cfg.samples),
                "mat_merge" => time_call(|| drop(black_box(mat_reduce(black_box(&tokens), None, x_cfg, r))), cfg.min_time, cfg.samples),
                "nap_prune" => {
                    let kernel_r = build_kernel(3);
                    let scores = fake_attention_scores(t);
                    time_call(
                        || {
                            let phi = neighbor_awareness(black_box(&scores), &kernel_r);
                            drop(black_box(prune(&tokens, &phi, 0.7, Default::default())));
                        },
                        cfg.min_time,
                        cfg.samples,
                    )
                }
                "bsm_merge" => time_call(|| drop(black_box(bsm_merge(black_box(&tokens), &keys, r))), cfg.min_time, cfg.samples),
                other => {
                    return Err(crate::error::CliError::Config(format!(
                        "unknown kernel {other:?}; expected one of {}",
                        KERNELS.join(", ")
                    )))
                }
            };
            let ops = op_count(kernel, t, 1);
            points.push(BenchPoint {
                kernel: kernel.clone(),
                tokens: t,
                dim: cfg.dim,
                r,
                ops,
                ns_per_call: ns,
                ns_per_op: ns / ops as f64,
            });
        }
    }
    let slopes = cfg
        .kernels
        .iter()
        .map(|k| {
            let pts: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| &p.kernel == k)
                .map(|p| (p.tokens as f64, p.ns_per_call))
                .collect();
            let (slope, intercept) = loglog_fit(&pts);
            SlopeFit {
                kernel: k.clone(),
                slope,
                intercept,
            }
        })
        .collect();
    Ok(BenchReport { points, slopes })
}

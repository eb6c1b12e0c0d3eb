//! A small deterministic transformer block: patch embedding, pre-norm
//! multi-head self-attention and a GELU MLP.
//!
//! Weights are seeded Gaussians (mean 0, std `init_std`), generated per layer from
//! `(seed, layer)`. Nothing is trained; the block exists to produce genuine
//! attention maps, keys and features for the reduction kernels.
//!
//! Reductions over keys (softmax normalizer and the attention-weighted value sum)
//! are accumulated in [`TokenBatch::canonical_key`] order, so the output for a
//! token does not depend on where the other tokens sit in the sequence.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::curve::GridShape;
use crate::error::{Error, Result};
use crate::tokens::TokenBatch;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub depth: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Adds `ln(size)` of each key to its attention logits.
    pub size_weighted: bool,
    /// When false, a fused tail token is not attended to by other tokens.
    pub fused_attends: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            dim: 384,
            heads: 6,
            mlp_ratio: 4.0,
            depth: 12,
            seed: 0,
            init_std: 0.02,
            size_weighted: true,
            fused_attends: true,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config("dim must be a positive multiple of heads"));
        }
        if self.mlp_ratio.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) {
            return Err(Error::Config("mlp_ratio must be positive"));
        }
        if !matches!(self.init_std.partial_cmp(&0.0), Some(core::cmp::Ordering::Greater | core::cmp::Ordering::Equal)) {
            return Err(Error::Config("init_std must be nonnegative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        libm::round(self.mlp_ratio * self.dim as f64) as usize
    }
}

/// Grayscale (1 channel) or RGB (3 channels) 8-bit raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument("raster must have 1 or 3 channels"));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch("raster data", width * height * channels, data.len()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Pixel-replicating grayscale to RGB; RGB is returned unchanged.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// `batch x heads x tokens x tokens` softmax weights, `attn[b][h][q][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    batch: usize,
    heads: usize,
    tokens: usize,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn from_weights(batch: usize, heads: usize, tokens: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != batch * heads * tokens * tokens {
            return Err(Error::ShapeMismatch("attention weights", batch * heads * tokens * tokens, weights.len()));
        }
        Ok(Self {
            batch,
            heads,
            tokens,
            weights,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, b: usize, h: usize, q: usize, k: usize) -> f64 {
        self.weights[((b * self.heads + h) * self.tokens + q) * self.tokens + k]
    }

    pub fn row(&self, b: usize, h: usize, q: usize) -> &[f64] {
        let off = ((b * self.heads + h) * self.tokens + q) * self.tokens;
        &self.weights[off..off + self.tokens]
    }
}

/// Per-head key vectors, `batch x heads x tokens x head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyTensor {
    batch: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    data: Vec<f64>,
}

impl KeyTensor {
    pub fn from_data(batch: usize, heads: usize, tokens: usize, head_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * heads * tokens * head_dim {
            return Err(Error::ShapeMismatch("key tensor", batch * heads * tokens * head_dim, data.len()));
        }
        Ok(Self {
            batch,
            heads,
            tokens,
            head_dim,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn key(&self, b: usize, h: usize, i: usize) -> &[f64] {
        let off = ((b * self.heads + h) * self.tokens + i) * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    /// Mean over heads of token `i`'s key.
    pub fn mean_key(&self, b: usize, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.head_dim];
        for h in 0..self.heads {
            for (o, &x) in out.iter_mut().zip(self.key(b, h, i)) {
                *o += x;
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    /// Keys of the selected tokens per sample; `None` entries become zero keys.
    pub fn gather(&self, sources: &[Vec<Option<usize>>]) -> Result<KeyTensor> {
        if sources.len() != self.batch {
            return Err(Error::ShapeMismatch("key gather batch", self.batch, sources.len()));
        }
        let tokens = sources.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(self.batch * self.heads * tokens * self.head_dim);
        for (b, src) in sources.iter().enumerate() {
            if src.len() != tokens {
                return Err(Error::ShapeMismatch("key gather length", tokens, src.len()));
            }
            for h in 0..self.heads {
                for s in src {
                    match s {
                        Some(i) => data.extend_from_slice(self.key(b, h, *i)),
                        None => data.extend(core::iter::repeat_n(0.0, self.head_dim)),
                    }
                }
            }
        }
        KeyTensor::from_data(self.batch, self.heads, tokens, self.head_dim, data)
    }
}

/// Row-major `rows x cols` matrix applied as `x * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..rows * cols).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; rows * cols]
        };
        Self {
            rows,
            cols,
            weight,
            bias: vec![0.0; cols],
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub qkv: Linear,
    pub proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Weights of one block. Layer norms use unit gain and zero shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub mlp: MlpWeights,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl AttentionWeights {
    pub fn generate(cfg: &BlockConfig, layer: usize) -> Self {
        let mut rng = stream_rng(cfg.seed, 2 * layer as u64 + 1);
        let c = cfg.dim;
        Self {
            qkv: Linear::gaussian(c, 3 * c, cfg.init_std, &mut rng),
            proj: Linear::gaussian(c, c, cfg.init_std, &mut rng),
        }
    }
}

impl MlpWeights {
    pub fn generate(cfg: &BlockConfig, layer: usize) -> Self {
        let mut rng = stream_rng(cfg.seed, 2 * layer as u64 + 2);
        let (c, hidden) = (cfg.dim, cfg.hidden());
        Self {
            fc1: Linear::gaussian(c, hidden, cfg.init_std, &mut rng),
            fc2: Linear::gaussian(hidden, c, cfg.init_std, &mut rng),
        }
    }
}

impl BlockWeights {
    pub fn generate(cfg: &BlockConfig, layer: usize) -> Self {
        Self {
            attn: AttentionWeights::generate(cfg, layer),
            mlp: MlpWeights::generate(cfg, layer),
        }
    }
}

fn layer_norm(x: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// One token per `patch x patch` tile through a seeded linear projection of the
/// tile's pixels (scaled to `[0, 1]`), preceded by a zero class token.
/// Tokens are laid out row-major over the patch grid.
pub fn embed_patches(image: &Raster, patch: usize, dim: usize, seed: u64) -> Result<(TokenBatch, GridShape)> {
    embed_batch(core::slice::from_ref(image), patch, dim, seed)
}

/// [`embed_patches`] for several same-sized images.
pub fn embed_batch(images: &[Raster], patch: usize, dim: usize, seed: u64) -> Result<(TokenBatch, GridShape)> {
    let first = images.first().ok_or(Error::InvalidArgument("no images to embed"))?;
    if patch == 0 || first.width % patch != 0 || first.height % patch != 0 {
        return Err(Error::ShapeMismatch("image side divisible by patch", patch, first.width.max(first.height)));
    }
    let grid = GridShape::new(first.height / patch, first.width / patch)?;
    let ch = first.channels;
    let proj = Linear::gaussian(patch * patch * ch, dim, 0.02, &mut stream_rng(seed, 0));
    let len = 1 + grid.len();
    let mut features = vec![0.0; images.len() * len * dim];
    let mut tile = vec![0.0; patch * patch * ch];
    for (b, img) in images.iter().enumerate() {
        if img.width != first.width || img.height != first.height || img.channels != ch {
            return Err(Error::ShapeMismatch("image batch shape", first.data.len(), img.data.len()));
        }
        for cell in 0..grid.len() {
            let (pr, pc) = grid.cell(cell);
            let mut t = 0;
            for y in 0..patch {
                let row = (pr * patch + y) * img.width;
                for x in 0..patch {
                    let px = (row + pc * patch + x) * ch;
                    for c in 0..ch {
                        tile[t] = img.data[px + c] as f64 / 255.0;
                        t += 1;
                    }
                }
            }
            let off = (b * len + 1 + cell) * dim;
            proj.apply(&tile, &mut features[off..off + dim]);
        }
    }
    Ok((TokenBatch::new(images.len(), len, dim, 1, features)?, grid))
}

/// Seeded standard-normal tokens over `grid`, with `protected` zero tokens in front.
pub fn synthetic_batch(batch: usize, grid: GridShape, dim: usize, protected: usize, seed: u64) -> Result<TokenBatch> {
    let mut rng = stream_rng(seed, u64::MAX);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let len = protected + grid.len();
    let mut features = vec![0.0; batch * len * dim];
    for b in 0..batch {
        for v in &mut features[(b * len + protected) * dim..(b + 1) * len * dim] {
            *v = normal.sample(&mut rng);
        }
    }
    TokenBatch::new(batch, len, dim, protected, features)
}

/// Attention half of block `layer` with freshly generated weights.
pub fn attention_forward(
    tokens: &TokenBatch,
    cfg: &BlockConfig,
    layer: usize,
) -> Result<(TokenBatch, AttentionMap, KeyTensor)> {
    cfg.validate()?;
    attention_forward_with(tokens, cfg, &AttentionWeights::generate(cfg, layer))
}

/// Pre-norm multi-head self-attention with residual:
/// `x + proj(softmax(q k^T / sqrt(d) [+ ln size_k]) v)`.
pub fn attention_forward_with(
    tokens: &TokenBatch,
    cfg: &BlockConfig,
    w: &AttentionWeights,
) -> Result<(TokenBatch, AttentionMap, KeyTensor)> {
    let c = cfg.dim;
    if tokens.dim() != c {
        return Err(Error::ShapeMismatch("token dim", c, tokens.dim()));
    }
    if w.qkv.rows != c || w.qkv.cols != 3 * c || w.proj.rows != c || w.proj.cols != c {
        return Err(Error::ShapeMismatch("attention weights", c, w.qkv.rows));
    }
    let (bsz, t, heads, d) = (tokens.batch(), tokens.len(), cfg.heads, cfg.head_dim());
    let scale = 1.0 / libm::sqrt(d as f64);

    let mut out = tokens.clone();
    let mut attn = vec![0.0; bsz * heads * t * t];
    let mut keys = vec![0.0; bsz * heads * t * d];
    let mut qkv = vec![0.0; t * 3 * c];
    let mut normed = vec![0.0; c];
    let mut logits = vec![0.0; t];
    let mut mixed = vec![0.0; c];
    let mut projected = vec![0.0; c];

    for b in 0..bsz {
        for i in 0..t {
            layer_norm(tokens.token(b, i), &mut normed);
            w.qkv.apply(&normed, &mut qkv[i * 3 * c..(i + 1) * 3 * c]);
        }
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by_key(|&i| tokens.canonical_key(b, i));
        let log_size: Vec<f64> = (0..t)
            .map(|i| if cfg.size_weighted { libm::log(tokens.size(b, i)) } else { 0.0 })
            .collect();
        let muted = (!cfg.fused_attends && tokens.fused_tail()).then(|| t - 1);

        for h in 0..heads {
            for i in 0..t {
                let off = ((b * heads + h) * t + i) * d;
                keys[off..off + d].copy_from_slice(&qkv[i * 3 * c + c + h * d..i * 3 * c + c + (h + 1) * d]);
            }
        }
        for q in 0..t {
            for h in 0..heads {
                let qv = &qkv[q * 3 * c + h * d..q * 3 * c + (h + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for k in 0..t {
                    logits[k] = if muted == Some(k) && q != k {
                        f64::NEG_INFINITY
                    } else {
                        let kv = &qkv[k * 3 * c + c + h * d..k * 3 * c + c + (h + 1) * d];
                        dot(qv, kv) * scale + log_size[k]
                    };
                    max = max.max(logits[k]);
                }
                let mut denom = 0.0;
                for &k in &order {
                    logits[k] = libm::exp(logits[k] - max);
                    denom += logits[k];
                }
                let row = &mut attn[((b * heads + h) * t + q) * t..((b * heads + h) * t + q + 1) * t];
                let acc = &mut mixed[h * d..(h + 1) * d];
                acc.fill(0.0);
                for &k in &order {
                    let p = logits[k] / denom;
                    row[k] = p;
                    let v = &qkv[k * 3 * c + 2 * c + h * d..k * 3 * c + 2 * c + (h + 1) * d];
                    for (a, &vv) in acc.iter_mut().zip(v) {
                        *a += p * vv;
                    }
                }
            }
            w.proj.apply(&mixed, &mut projected);
            for (o, &p) in out.token_mut(b, q).iter_mut().zip(&projected) {
                *o += p;
            }
        }
    }
    Ok((
        out,
        AttentionMap::from_weights(bsz, heads, t, attn)?,
        KeyTensor::from_data(bsz, heads, t, d, keys)?,
    ))
}

/// MLP half of block `layer` with freshly generated weights.
pub fn mlp_forward(tokens: &TokenBatch, cfg: &BlockConfig, layer: usize) -> Result<TokenBatch> {
    cfg.validate()?;
    mlp_forward_with(tokens, cfg, &MlpWeights::generate(cfg, layer))
}

/// `x + fc2(gelu(fc1(layer_norm(x))))`, token by token.
pub fn mlp_forward_with(tokens: &TokenBatch, cfg: &BlockConfig, w: &MlpWeights) -> Result<TokenBatch> {
    let c = cfg.dim;
    if tokens.dim() != c {
        return Err(Error::ShapeMismatch("token dim", c, tokens.dim()));
    }
    if w.fc1.rows != c || w.fc2.cols != c || w.fc1.cols != w.fc2.rows {
        return Err(Error::ShapeMismatch("mlp weights", c, w.fc1.rows));
    }
    let mut out = tokens.clone();
    let mut normed = vec![0.0; c];
    let mut hidden = vec![0.0; w.fc1.cols];
    let mut y = vec![0.0; c];
    for b in 0..tokens.batch() {
        for i in 0..tokens.len() {
            layer_norm(tokens.token(b, i), &mut normed);
            w.fc1.apply(&normed, &mut hidden);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            w.fc2.apply(&hidden, &mut y);
            for (o, &v) in out.token_mut(b, i).iter_mut().zip(&y) {
                *o += v;
            }
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

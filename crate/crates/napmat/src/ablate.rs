//! Ordering ablation: locality of each curve kind and how similar
//! sequence-adjacent patch embeddings of real images are under it.

use napmat_core::mat::cosine;
use napmat_core::tokens::reorder_tokens;
use napmat_core::vit::{embed_patches, Raster};
use napmat_core::{locality_score, CurveKind, GridShape};
use serde::{Deserialize, Serialize};

use crate::cache::OrderCache;
use crate::error::{CliError, Result};

pub const RADII: [usize; 4] = [1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: String,
    /// Locality at radii 1..=4.
    pub locality: Vec<f64>,
    /// Mean cosine similarity of consecutive patch tokens, over all images;
    /// `None` without images.
    pub mean_adjacent_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: [usize; 2],
    pub radii: Vec<usize>,
    pub images: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, kind: CurveKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.kind == kind.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Grid used for the locality table when there are no images.
    pub grid: GridShape,
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: GridShape { rows: 14, cols: 14 },
            patch: 16,
            dim: 384,
            seed: 0,
        }
    }
}

/// Mean cosine similarity of sequence-adjacent image tokens under `kind`.
pub fn adjacent_cosine(image: &Raster, kind: CurveKind, cfg: &AblationConfig, cache: &OrderCache) -> Result<(f64, usize)> {
    let (tokens, grid) = embed_patches(image, cfg.patch, cfg.dim, cfg.seed)?;
    let order = cache.get(grid, kind)?;
    let seq = reorder_tokens(&tokens, &order)?;
    let p = seq.protected();
    let mut sum = 0.0;
    let mut count = 0;
    for i in p..seq.len() - 1 {
        let c = cosine(seq.token(0, i), seq.token(0, i + 1));
        // flat zero tiles have no direction
        if c.is_finite() {
            sum += c;
            count += 1;
        }
    }
    Ok((sum, count))
}

pub fn ablate(images: &[(String, Raster)], cfg: &AblationConfig, cache: &OrderCache) -> Result<AblationReport> {
    let grid = match images.first() {
        Some((name, img)) => {
            if img.width % cfg.patch != 0 || img.height % cfg.patch != 0 {
                return Err(CliError::Input(format!("{name}: size is not a multiple of the patch size {}", cfg.patch)));
            }
            GridShape::new(img.height / cfg.patch, img.width / cfg.patch)?
        }
        None => cfg.grid,
    };
    let radii: Vec<usize> = RADII.iter().copied().filter(|&r| r < grid.len()).collect();
    let rows = CurveKind::ALL
        .iter()
        .map(|&kind| {
            let order = cache.get(grid, kind)?;
            let locality = radii.iter().map(|&r| locality_score(&order, r)).collect::<napmat_core::Result<Vec<_>>>()?;
            let mean_adjacent_cosine = if images.is_empty() {
                None
            } else {
                let (mut sum, mut count) = (0.0, 0);
                for (_, img) in images {
                    let (s, c) = adjacent_cosine(img, kind, cfg, cache)?;
                    sum += s;
                    count += c;
                }
                Some(if count == 0 { 0.0 } else { sum / count as f64 })
            };
            Ok(AblationRow {
                kind: kind.name().into(),
                locality,
                mean_adjacent_cosine,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        grid: [grid.rows, grid.cols],
        radii,
        images: images.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

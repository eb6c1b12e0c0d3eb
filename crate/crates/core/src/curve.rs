//! Space-filling-curve orders over rectangular patch grids.
//!
//! A [`CurveOrder`] maps sequence positions to grid cells (`perm`) and back
//! (`inverse`). The Hilbert kind uses the generalized rectangle-splitting
//! construction so that any `rows x cols` grid gets a unit-step path, not only
//! power-of-two squares.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Patch grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index of a cell.
    #[inline]
    pub fn linear(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.cols + cell.1
    }

    #[inline]
    pub fn cell(&self, linear: usize) -> (usize, usize) {
        (linear / self.cols, linear % self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CurveKind {
    RowMajor,
    Hilbert,
    Boustrophedon,
    ZOrder,
}

impl CurveKind {
    pub const ALL: [CurveKind; 4] = [
        CurveKind::Hilbert,
        CurveKind::RowMajor,
        CurveKind::Boustrophedon,
        CurveKind::ZOrder,
    ];

    /// Short name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::RowMajor => "row",
            CurveKind::Hilbert => "hilbert",
            CurveKind::Boustrophedon => "boustro",
            CurveKind::ZOrder => "z",
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "row-major" | "rowmajor" => Ok(CurveKind::RowMajor),
            "hilbert" => Ok(CurveKind::Hilbert),
            "boustro" | "boustrophedon" | "snake" => Ok(CurveKind::Boustrophedon),
            "z" | "zorder" | "morton" => Ok(CurveKind::ZOrder),
            _ => Err(Error::InvalidArgument("unknown curve kind")),
        }
    }
}

/// A bijection between sequence positions and grid cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveOrder {
    shape: GridShape,
    kind: CurveKind,
    perm: Vec<(usize, usize)>,
    inverse: Vec<usize>,
}

impl CurveOrder {
    fn from_perm(shape: GridShape, kind: CurveKind, perm: Vec<(usize, usize)>) -> Self {
        debug_assert_eq!(perm.len(), shape.len());
        let mut inverse = vec![usize::MAX; shape.len()];
        for (k, &cell) in perm.iter().enumerate() {
            inverse[shape.linear(cell)] = k;
        }
        Self {
            shape,
            kind,
            perm,
            inverse,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `perm()[k]` is the `(row, col)` cell visited at sequence position `k`.
    pub fn perm(&self) -> &[(usize, usize)] {
        &self.perm
    }

    /// Sequence position of a cell.
    pub fn position(&self, cell: (usize, usize)) -> usize {
        self.inverse[self.shape.linear(cell)]
    }

    /// Sequence positions indexed by row-major cell index.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Row-major linear cell index visited at each sequence position.
    pub fn linear_perm(&self) -> Vec<usize> {
        self.perm.iter().map(|&c| self.shape.linear(c)).collect()
    }
}

/// Builds the curve of the given kind over `shape`. Deterministic.
pub fn build_order(shape: GridShape, kind: CurveKind) -> Result<CurveOrder> {
    let shape = GridShape::new(shape.rows, shape.cols)?;
    let perm = match kind {
        CurveKind::RowMajor => (0..shape.len()).map(|i| shape.cell(i)).collect(),
        CurveKind::Boustrophedon => boustrophedon(shape),
        CurveKind::ZOrder => z_order(shape),
        CurveKind::Hilbert => gilbert(shape),
    };
    Ok(CurveOrder::from_perm(shape, kind, perm))
}

/// Mean Manhattan distance between the cells at sequence positions `k` and
/// `k + radius`, over all valid `k`. Lower is more local.
pub fn locality_score(order: &CurveOrder, radius: usize) -> Result<f64> {
    if radius == 0 {
        return Err(Error::InvalidArgument("radius must be at least 1"));
    }
    if radius >= order.len() {
        return Err(Error::InvalidArgument("radius must be smaller than the sequence length"));
    }
    let total: usize = order
        .perm
        .iter()
        .zip(&order.perm[radius..])
        .map(|(a, b)| a.0.abs_diff(b.0) + a.1.abs_diff(b.1))
        .sum();
    Ok(total as f64 / (order.len() - radius) as f64)
}

fn boustrophedon(shape: GridShape) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(shape.len());
    for r in 0..shape.rows {
        if r % 2 == 0 {
            out.extend((0..shape.cols).map(|c| (r, c)));
        } else {
            out.extend((0..shape.cols).rev().map(|c| (r, c)));
        }
    }
    out
}

fn morton(row: usize, col: usize) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut x = v as u64;
        x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
        x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
        x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
        x = (x | (x << 2)) & 0x3333_3333_3333_3333;
        x = (x | (x << 1)) & 0x5555_5555_5555_5555;
        x
    }
    (spread(row as u32) << 1) | spread(col as u32)
}

// Cells sorted by their Morton code; on non-power-of-two grids this is the
// power-of-two curve with the out-of-range cells skipped.
fn z_order(shape: GridShape) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..shape.len()).map(|i| shape.cell(i)).collect();
    cells.sort_by_key(|&(r, c)| morton(r, c));
    cells
}

// Generalized Hilbert curve ("gilbert") over a rectangle. Coordinates are
// (x = col, y = row); the walk starts at (0, 0) and ends on the far corner of
// the x axis, or of the y axis when cols is odd and rows even. With an even cell
// count the end corner must have the opposite checkerboard color of the start
// for a unit-step path to exist.
fn gilbert(shape: GridShape) -> Vec<(usize, usize)> {
    let w = shape.cols as i64;
    let h = shape.rows as i64;
    let mut out = Vec::with_capacity(shape.len());
    if !(w % 2 == 1 && h % 2 == 0) {
        gilbert_rec(&mut out, 0, 0, w, 0, 0, h);
    } else {
        gilbert_rec(&mut out, 0, 0, 0, h, w, 0);
    }
    out
}

fn gilbert_rec(out: &mut Vec<(usize, usize)>, mut x: i64, mut y: i64, ax: i64, ay: i64, bx: i64, by: i64) {
    let w = (ax + ay).abs();
    let h = (bx + by).abs();
    let (dax, day) = (ax.signum(), ay.signum());
    let (dbx, dby) = (bx.signum(), by.signum());

    if h == 1 {
        for _ in 0..w {
            out.push((y as usize, x as usize));
            x += dax;
            y += day;
        }
        return;
    }
    if w == 1 {
        for _ in 0..h {
            out.push((y as usize, x as usize));
            x += dbx;
            y += dby;
        }
        return;
    }

    let (mut ax2, mut ay2) = (ax / 2, ay / 2);
    let (mut bx2, mut by2) = (bx / 2, by / 2);
    let w2 = (ax2 + ay2).abs();
    let h2 = (bx2 + by2).abs();

    if 2 * w > 3 * h {
        if w2 % 2 != 0 && w > 2 {
            ax2 += dax;
            ay2 += day;
        }
        gilbert_rec(out, x, y, ax2, ay2, bx, by);
        gilbert_rec(out, x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by);
    } else {
        if h2 % 2 != 0 && h > 2 {
            bx2 += dbx;
            by2 += dby;
        }
        gilbert_rec(out, x, y, bx2, by2, ax2, ay2);
        gilbert_rec(out, x + bx2, y + by2, ax, ay, bx - bx2, by - by2);
        gilbert_rec(
            out,
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2,
            -by2,
            -(ax - ax2),
            -(ay - ay2),
        );
    }
}

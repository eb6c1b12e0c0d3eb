//! Neighbor-aware token reduction for vision-transformer token sequences.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece:
//!
//! * [`curve`]: space-filling-curve orders over patch grids (generalized Hilbert,
//!   row-major, boustrophedon, Z-order) and their locality statistics.
//! * [`tokens`]: the [`TokenBatch`] container with per-token sizes and provenance.
//! * [`vit`]: a small deterministic transformer block used to produce real
//!   attention maps and keys.
//! * [`nap`]: neighbor-aware pruning (received attention, distance-decay smoothing,
//!   class-attention blend, top-k keep with a fused remainder token).
//! * [`mat`]: merging of sequence-adjacent tokens with run detection and forward fill.
//! * [`hynap`]: pruning followed by importance-grouped bipartite soft matching.
//! * [`flops`]: analytic FLOPs accounting for token schedules.
//! * [`pipeline`]: embed, reorder and run a stack of blocks with a reduction method.
//!
//! File formats, configuration and the command line live in the `napmat` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod curve;
pub mod error;
pub mod flops;
pub mod hynap;
pub mod mat;
pub mod nap;
pub mod pipeline;
pub mod select;
pub mod tokens;
pub mod vit;

pub use curve::{build_order, locality_score, CurveKind, CurveOrder, GridShape};
pub use error::{Error, Result};
pub use tokens::TokenBatch;

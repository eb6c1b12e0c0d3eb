//! File formats, configuration, reports and the `napmat` command line on top
//! of [`napmat_core`].

pub mod ablate;
pub mod bench;
pub mod cache;
pub mod cli;
pub mod config;
pub mod error;
pub mod netpbm;
pub mod report;
pub mod run;

pub use error::{CliError, Result};
pub use napmat_core;

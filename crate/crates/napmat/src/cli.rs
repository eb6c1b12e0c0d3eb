//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use napmat_core::flops::{schedule_flops, ModelSpec, TokenSchedule};
use napmat_core::hynap::HybridSchedule;
use napmat_core::vit::Raster;
use napmat_core::{CurveKind, CurveOrder, GridShape};
use serde::Serialize;

use crate::ablate::{ablate, AblationConfig};
use crate::bench::{run_bench, BenchConfig};
use crate::cache;
use crate::config::{parse_pairs, parse_schedule, RunConfig, SEED_ENV};
use crate::error::{config_error, core_message, CliError, Result};
use crate::netpbm;
use crate::run::{load_images, run, Input};

#[derive(Debug, Parser)]
#[command(name = "napmat", version, about = "Neighbor-aware token reduction for vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a curve order over a patch grid.
    Order(OrderArgs),
    /// Run the reduction pipeline on images or synthetic tokens.
    Run(RunArgs),
    /// Analytic FLOPs of a model under a token schedule.
    Flops(FlopsArgs),
    /// Compare curve orders by locality and adjacent-token similarity.
    Ablate(AblateArgs),
    /// Time the reduction kernels and fit their scaling in the token count.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Pgm,
}

#[derive(Debug, Args)]
pub struct OrderArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value = "hilbert")]
    pub kind: CurveKind,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub curve: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// PPM/PGM image or a directory of them.
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Synthetic token grid, `ROWSxCOLS`.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Report path; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Directory for per-layer token survival maps.
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// deit-s, deit-b, deit-b-384, vit-b or vit-l.
    #[arg(long, default_value = "deit-s")]
    pub model: String,
    /// File or inline spec: `none`, `nap[:KEEP[@L1,L2,..]]`, `mat:R`,
    /// `hynap:P:M,...` or explicit per-layer counts `N1,N2,...`.
    #[arg(long, default_value = "none")]
    pub schedule: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory of PPM/PGM images (all of one size).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 14)]
    pub rows: usize,
    #[arg(long, default_value_t = 14)]
    pub cols: usize,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 384)]
    pub dim: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096, 8192])]
    pub tokens: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub r: usize,
    #[arg(long, value_delimiter = ',')]
    pub kernels: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub min_ms: u64,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(bytes).map_err(|e| CliError::Io(e.to_string())),
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    emit(out, text.as_bytes())
}

fn seed_env() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// Pixel `(r, c)` holds the cell's sequence position scaled to 0..=255.
pub fn order_image(order: &CurveOrder) -> Raster {
    let shape = order.shape();
    let last = (order.len() - 1).max(1) as f64;
    let data = order.inverse().iter().map(|&k| (k as f64 * 255.0 / last).round() as u8).collect();
    Raster::new(shape.cols, shape.rows, 1, data).expect("one pixel per cell")
}

#[derive(Serialize)]
struct OrderJson<'a> {
    rows: usize,
    cols: usize,
    kind: &'a str,
    perm: &'a [(usize, usize)],
}

fn cmd_order(args: &OrderArgs) -> Result<()> {
    let shape = GridShape::new(args.rows, args.cols).map_err(config_error)?;
    let order = cache::global().get(shape, args.kind)?;
    match args.emit {
        Emit::Json => emit_json(
            args.out.as_deref(),
            &OrderJson {
                rows: shape.rows,
                cols: shape.cols,
                kind: args.kind.name(),
                perm: order.perm(),
            },
        ),
        Emit::Pgm => emit(args.out.as_deref(), &netpbm::encode(&order_image(&order))),
    }
}

pub fn parse_grid(text: &str) -> Result<GridShape> {
    let bad = || CliError::Config(format!("grid must look like ROWSxCOLS, got {text:?}"));
    let (r, c) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows = r.trim().parse().map_err(|_| bad())?;
    let cols = c.trim().parse().map_err(|_| bad())?;
    GridShape::new(rows, cols).map_err(|_| bad())
}

/// Config from file, environment and flags, in that order of precedence.
pub fn resolve_config(args: &RunArgs, seed_env: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_seed_env(seed_env)?;
    if let Some(m) = &args.method {
        cfg.set("method", m)?;
    }
    if let Some(c) = &args.curve {
        cfg.set("curve", c)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let overrides = parse_pairs(&args.set.join("\n"))?;
    cfg.apply_pairs(&overrides)?;
    cfg.pipeline()?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args, seed_env().as_deref())?;
    let input = match (&args.input, &args.synthetic) {
        (Some(path), _) => Input::Images(path.clone()),
        (None, Some(grid)) => Input::Synthetic {
            grid: parse_grid(grid)?,
            batch: args.batch,
        },
        (None, None) => return Err(CliError::Config("one of --input or --synthetic is required".into())),
    };
    let out = run(&cfg, &input, args.threads)?;
    if let Some(dir) = &args.render {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for (name, image) in &out.renders {
            netpbm::write(&dir.join(name), image)?;
        }
    }
    let mut text = out.report.to_json();
    text.push('\n');
    emit(args.out.as_deref(), text.as_bytes())
}

/// Parses a `flops --schedule` value, reading it from a file when one exists at that path.
pub fn parse_token_schedule(spec: &ModelSpec, text: &str) -> Result<TokenSchedule> {
    let owned;
    let text = if Path::new(text).is_file() {
        owned = fs::read_to_string(text).map_err(|e| CliError::Input(format!("{text}: {e}")))?;
        owned
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join(",")
    } else {
        text.trim().to_string()
    };
    let bad = |msg: String| CliError::Config(format!("schedule: {msg}"));
    let (head, rest) = text.split_once(':').map_or((text.as_str(), ""), |(h, r)| (h, r));
    let schedule = match head {
        "none" | "constant" => TokenSchedule::constant(spec),
        "nap" => {
            let (keep, layers) = rest.split_once('@').map_or((rest, ""), |(k, l)| (k, l));
            let keep = if keep.is_empty() {
                0.7
            } else {
                keep.parse().map_err(|_| bad(format!("bad keep ratio {keep:?}")))?
            };
            let layers: Vec<usize> = if layers.is_empty() {
                vec![3, 6, 9]
            } else {
                layers
                    .split(',')
                    .map(|l| l.trim().parse().map_err(|_| bad(format!("bad layer {l:?}"))))
                    .collect::<Result<_>>()?
            };
            TokenSchedule::nap(spec, keep, &layers).map_err(|e| bad(core_message(&e)))?
        }
        "mat" => TokenSchedule::mat(spec, rest.trim().parse().map_err(|_| bad(format!("bad r {rest:?}")))?),
        "hynap" => {
            let mut entries = parse_schedule(rest)?;
            if entries.len() == 1 {
                entries = vec![entries[0]; spec.depth];
            }
            TokenSchedule::hybrid(spec, &HybridSchedule { entries }).map_err(|e| bad(core_message(&e)))?
        }
        _ => {
            let counts: Vec<u64> = text
                .split(',')
                .map(|n| n.trim().parse().map_err(|_| bad(format!("unrecognised schedule {text:?}"))))
                .collect::<Result<_>>()?;
            TokenSchedule {
                initial: spec.tokens(),
                counts,
            }
        }
    };
    schedule.validate(spec).map_err(|e| bad(core_message(&e)))?;
    Ok(schedule)
}

#[derive(Serialize)]
struct FlopsJson {
    model: String,
    total: u64,
    per_layer: Vec<u64>,
    embed: u64,
    head: u64,
    tokens: Vec<u64>,
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let spec = ModelSpec::preset(&args.model).ok_or_else(|| {
        let names: Vec<String> = ModelSpec::presets().into_iter().map(|p| p.name).collect();
        CliError::Config(format!("unknown model {:?}; expected one of {}", args.model, names.join(", ")))
    })?;
    let schedule = parse_token_schedule(&spec, &args.schedule)?;
    let b = schedule_flops(&schedule, &spec).map_err(config_error)?;
    emit_json(
        None,
        &FlopsJson {
            model: spec.name,
            total: b.total,
            per_layer: b.per_layer,
            embed: b.embed,
            head: b.head,
            tokens: schedule.counts,
        },
    )
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut seed = 0;
    if let Some(v) = seed_env() {
        seed = v.parse().map_err(|_| CliError::Config(format!("{SEED_ENV}: not an integer: {v:?}")))?;
    }
    let cfg = AblationConfig {
        grid: GridShape::new(args.rows, args.cols).map_err(config_error)?,
        patch: args.patch,
        dim: args.dim,
        seed: args.seed.unwrap_or(seed),
    };
    if cfg.patch == 0 || cfg.dim == 0 {
        return Err(CliError::Config("patch and dim must be positive".into()));
    }
    let images = match &args.input {
        Some(dir) => load_images(dir)?,
        None => Vec::new(),
    };
    emit_json(args.out.as_deref(), &ablate(&images, &cfg, cache::global())?)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    if args.tokens.iter().any(|&t| t < 8) {
        return Err(CliError::Config("token counts must be at least 8".into()));
    }
    let mut cfg = BenchConfig {
        tokens: args.tokens.clone(),
        dim: args.dim,
        r: args.r,
        min_time: Duration::from_millis(args.min_ms),
        samples: args.samples,
        ..BenchConfig::default()
    };
    if !args.kernels.is_empty() {
        cfg.kernels = args.kernels.clone();
    }
    emit_json(args.out.as_deref(), &run_bench(&cfg)?)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Order(a) => cmd_order(a),
        Command::Run(a) => cmd_run(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

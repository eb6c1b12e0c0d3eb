//! `key = value` run configuration. Later sources override earlier ones:
//! defaults, then a config file, then `NAPMAT_SEED`, then command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use napmat_core::hynap::HybridSchedule;
use napmat_core::mat::{SimilarityConfig, SimilarityFeature, SimilarityMetric};
use napmat_core::nap::{FusedWeighting, NapConfig};
use napmat_core::pipeline::{MatConfig, Method, MethodKind, PipelineConfig};
use napmat_core::vit::BlockConfig;
use napmat_core::CurveKind;
use serde::{Deserialize, Serialize};

use crate::error::{config_error, CliError, Result};

pub const SEED_ENV: &str = "NAPMAT_SEED";

/// Every recognised key, in the order used when echoing a config.
pub const KEYS: &[&str] = &[
    "seed",
    "method",
    "curve",
    "model.dim",
    "model.heads",
    "model.depth",
    "model.mlp_ratio",
    "model.patch",
    "model.size_weighted",
    "model.fused_attends",
    "nap.radius",
    "nap.alpha",
    "nap.keep_ratio",
    "nap.layers",
    "nap.fused_weighting",
    "mat.metric",
    "mat.feature",
    "mat.r_per_layer",
    "mat.protected",
    "hynap.schedule",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub curve: String,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub patch: usize,
    pub size_weighted: bool,
    pub fused_attends: bool,
    pub nap_radius: usize,
    pub nap_alpha: f64,
    pub nap_keep_ratio: f64,
    pub nap_layers: Vec<usize>,
    pub nap_fused_weighting: String,
    pub mat_metric: String,
    pub mat_feature: String,
    pub mat_r_per_layer: usize,
    pub protected: usize,
    /// `(prune, merge)` per layer; a single entry is repeated for every layer.
    pub hynap_schedule: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let block = BlockConfig::default();
        let nap = NapConfig::default();
        Self {
            seed: block.seed,
            method: "none".into(),
            curve: CurveKind::Hilbert.name().into(),
            dim: block.dim,
            heads: block.heads,
            depth: block.depth,
            mlp_ratio: block.mlp_ratio,
            patch: 16,
            size_weighted: block.size_weighted,
            fused_attends: block.fused_attends,
            nap_radius: nap.radius,
            nap_alpha: nap.alpha,
            nap_keep_ratio: nap.keep_ratio,
            nap_layers: nap.layers,
            nap_fused_weighting: nap.fused_weighting.name().into(),
            mat_metric: SimilarityMetric::default().to_string(),
            mat_feature: SimilarityFeature::default().to_string(),
            mat_r_per_layer: 8,
            protected: 1,
            hynap_schedule: vec![(0, 0)],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `p:m,p:m,...`; `p:m*k` repeats a pair `k` times.
pub fn parse_schedule(value: &str) -> Result<Vec<(usize, usize)>> {
    let key = "hynap.schedule";
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (pair, times) = match item.split_once('*') {
            Some((pair, times)) => (pair, parse::<usize>(key, times)?),
            None => (item, 1),
        };
        let (p, m) = pair
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("{key}: expected prune:merge, got {item:?}")))?;
        out.extend(std::iter::repeat_n((parse(key, p)?, parse(key, m)?), times));
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("{key}: empty schedule")));
    }
    Ok(out)
}

fn format_schedule(entries: &[(usize, usize)]) -> String {
    entries.iter().map(|(p, m)| format!("{p}:{m}")).collect::<Vec<_>>().join(",")
}

/// Splits `text` into `key = value` pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "method" => {
                MethodKind::from_str(value.trim()).map_err(config_error)?;
                self.method = value.trim().into();
            }
            "curve" => self.curve = parse::<CurveKind>(key, value)?.name().into(),
            "model.dim" => self.dim = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.depth" => self.depth = parse(key, value)?,
            "model.mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "model.patch" => self.patch = parse(key, value)?,
            "model.size_weighted" => self.size_weighted = parse_bool(key, value)?,
            "model.fused_attends" => self.fused_attends = parse_bool(key, value)?,
            "nap.radius" => self.nap_radius = parse(key, value)?,
            "nap.alpha" => self.nap_alpha = parse(key, value)?,
            "nap.keep_ratio" => self.nap_keep_ratio = parse(key, value)?,
            "nap.layers" => self.nap_layers = parse_list(key, value)?,
            "nap.fused_weighting" => self.nap_fused_weighting = parse::<FusedWeighting>(key, value)?.name().into(),
            "mat.metric" => self.mat_metric = parse::<SimilarityMetric>(key, value)?.to_string(),
            "mat.feature" => self.mat_feature = parse::<SimilarityFeature>(key, value)?.to_string(),
            "mat.r_per_layer" => self.mat_r_per_layer = parse(key, value)?,
            "mat.protected" => self.protected = parse(key, value)?,
            "hynap.schedule" => self.hynap_schedule = parse_schedule(value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "seed" => self.seed.to_string(),
            "method" => self.method.clone(),
            "curve" => self.curve.clone(),
            "model.dim" => self.dim.to_string(),
            "model.heads" => self.heads.to_string(),
            "model.depth" => self.depth.to_string(),
            "model.mlp_ratio" => self.mlp_ratio.to_string(),
            "model.patch" => self.patch.to_string(),
            "model.size_weighted" => self.size_weighted.to_string(),
            "model.fused_attends" => self.fused_attends.to_string(),
            "nap.radius" => self.nap_radius.to_string(),
            "nap.alpha" => self.nap_alpha.to_string(),
            "nap.keep_ratio" => self.nap_keep_ratio.to_string(),
            "nap.layers" => join(&self.nap_layers),
            "nap.fused_weighting" => self.nap_fused_weighting.clone(),
            "mat.metric" => self.mat_metric.clone(),
            "mat.feature" => self.mat_feature.clone(),
            "mat.r_per_layer" => self.mat_r_per_layer.to_string(),
            "mat.protected" => self.protected.to_string(),
            "hynap.schedule" => format_schedule(&self.hynap_schedule),
            _ => return None,
        })
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        self.apply_pairs(&parse_pairs(text)?)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies a `NAPMAT_SEED` value if one is given.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        match value {
            Some(v) => self.set("seed", v).map_err(|_| CliError::Config(format!("{SEED_ENV}: not an integer: {v:?}"))),
            None => Ok(()),
        }
    }

    /// The config as `key = value` lines, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).expect("known key"))).collect()
    }

    pub fn curve_kind(&self) -> Result<CurveKind> {
        parse("curve", &self.curve)
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            depth: self.depth,
            seed: self.seed,
            size_weighted: self.size_weighted,
            fused_attends: self.fused_attends,
            ..BlockConfig::default()
        }
    }

    pub fn nap(&self) -> Result<NapConfig> {
        let nap = NapConfig {
            radius: self.nap_radius,
            alpha: self.nap_alpha,
            keep_ratio: self.nap_keep_ratio,
            layers: self.nap_layers.clone(),
            fused_weighting: parse("nap.fused_weighting", &self.nap_fused_weighting)?,
        };
        nap.validate().map_err(config_error)?;
        Ok(nap)
    }

    pub fn schedule(&self) -> Result<HybridSchedule> {
        let entries = match self.hynap_schedule.as_slice() {
            [one] => vec![*one; self.depth],
            many => many.to_vec(),
        };
        if entries.len() != self.depth {
            return Err(CliError::Config(format!(
                "hynap.schedule: {} entries for depth {}",
                entries.len(),
                self.depth
            )));
        }
        Ok(HybridSchedule { entries })
    }

    /// Validated pipeline settings.
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let block = self.block();
        block.validate().map_err(config_error)?;
        if self.patch == 0 {
            return Err(CliError::Config("model.patch must be positive".into()));
        }
        if self.protected == 0 {
            return Err(CliError::Config("mat.protected must be at least 1 (the class token)".into()));
        }
        let kind = MethodKind::from_str(&self.method).map_err(config_error)?;
        let method = match kind {
            MethodKind::None => Method::None,
            MethodKind::Nap => Method::Nap(self.nap()?),
            MethodKind::Mat => Method::Mat(MatConfig {
                similarity: SimilarityConfig {
                    metric: parse("mat.metric", &self.mat_metric)?,
                    feature: parse("mat.feature", &self.mat_feature)?,
                },
                r_per_layer: self.mat_r_per_layer,
            }),
            MethodKind::Hynap => Method::Hynap {
                nap: self.nap()?,
                schedule: self.schedule()?,
            },
        };
        Ok(PipelineConfig {
            block,
            curve: self.curve_kind()?,
            method,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("method = hynap\nhynap.schedule = 2:3*12\nnap.layers = 1, 4\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hynap_schedule.len(), 12);
    }

    #[test]
    fn comments_and_blank_lines() {
        let pairs = parse_pairs("# header\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "5".to_string())]);
    }

    #[test]
    fn later_sources_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 1").unwrap();
        cfg.apply_seed_env(Some("7")).unwrap();
        assert_eq!(cfg.seed, 7);
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.apply_seed_env(Some("x")).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nap.bogus", "1").is_err());
        assert!(cfg.set("method", "prune").is_err());
        assert!(cfg.set("nap.fused_weighting", "max").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
        assert!(parse_schedule("1-2").is_err());
        cfg.set("nap.alpha", "1.5").unwrap();
        cfg.set("method", "nap").unwrap();
        assert!(matches!(cfg.pipeline(), Err(CliError::Config(_))));
    }

    #[test]
    fn schedule_broadcast_and_length() {
        let mut cfg = RunConfig::default();
        cfg.set("hynap.schedule", "1:2").unwrap();
        assert_eq!(cfg.schedule().unwrap().entries, vec![(1, 2); 12]);
        cfg.set("hynap.schedule", "1:2,3:4").unwrap();
        assert!(cfg.schedule().is_err());
    }
}

//! Run configuration: a flat `key = value` file, overridable per key.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{PanelMode, MAX_PANEL_SIZE};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::nn::BackboneConfig;
use crate::retrieval::DEFAULT_K;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub workdir: PathBuf,
    pub panel: PanelMode,
    pub panel_size: usize,
    /// Per-slice z-scoring of normalised expression.
    pub standardize: bool,
    /// Query slices; empty means the manifest's last slice.
    pub holdout: Vec<String>,
    pub k: usize,
    pub include_query_in_reference: bool,
    /// `None` draws a fresh seed, which is then recorded in the outputs.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    /// JSON tensor map with `image.backbone.*` entries.
    pub backbone_weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            workdir: PathBuf::from("work"),
            panel: PanelMode::Hvg,
            panel_size: MAX_PANEL_SIZE,
            standardize: false,
            holdout: Vec::new(),
            k: DEFAULT_K,
            include_query_in_reference: false,
            seed: None,
            train: TrainConfig::default(),
            backbone_weights: None,
        }
    }
}

pub const KEYS: [&str; 22] = [
    "manifest",
    "workdir",
    "panel",
    "panel_size",
    "standardize",
    "holdout",
    "k",
    "include_query_in_reference",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "split_fraction",
    "temperature",
    "loss",
    "spot_loss_weight",
    "augment",
    "embed_dim",
    "backbone",
    "compact_features",
    "backbone_weights",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "workdir" => self.workdir = PathBuf::from(value),
            "panel" => self.panel = value.parse()?,
            "panel_size" => self.panel_size = parse(key, value)?,
            "standardize" => self.standardize = parse_bool(key, value)?,
            "holdout" => {
                self.holdout = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "k" => self.k = parse(key, value)?,
            "include_query_in_reference" => self.include_query_in_reference = parse_bool(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" | "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "split_fraction" => t.split_fraction = parse(key, value)?,
            "temperature" => t.loss.temperature = parse(key, value)?,
            "loss" => t.loss.mode = value.parse::<LossMode>()?,
            "spot_loss_weight" => t.loss.spot_loss_weight = parse(key, value)?,
            "augment" => t.augment = parse_bool(key, value)?,
            "embed_dim" => t.embed_dim = parse(key, value)?,
            "backbone" => {
                t.backbone = match value {
                    "compact" => match t.backbone {
                        BackboneConfig::Compact { .. } => t.backbone.clone(),
                        _ => BackboneConfig::default(),
                    },
                    "residual50" => BackboneConfig::residual50(),
                    other => return Err(Error::InvalidConfig(format!("unknown backbone {other:?}"))),
                }
            }
            "compact_features" => t.backbone = BackboneConfig::compact(parse(key, value)?),
            "backbone_weights" => self.backbone_weights = Some(PathBuf::from(value)),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {other:?}; expected one of {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// The configured seed, drawing and storing one if absent.
    pub fn resolve_seed(&mut self) -> u64 {
        *self.seed.get_or_insert_with(rand::random)
    }

    /// Training configuration with the seed resolved.
    pub fn train_config(&mut self) -> TrainConfig {
        let seed = self.resolve_seed();
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

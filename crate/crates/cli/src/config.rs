//! Run configuration: a TOML file with `data`, `model`, `filter`, `loss`,
//! `train` and `eval` sections, plus `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use radar_depth::dataio::{PatternKind, PatternParams, Split};
use radar_depth::filtering::ThresholdParams;
use radar_depth::network::{NetworkConfig, Variant};
use radar_depth::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "RADAR_DEPTH_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub filter: ThresholdParams,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// On-disk layout under `data.root`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// One directory per sample, as written by `synth-gen`.
    #[default]
    Native,
    /// Official nuScenes tree (metadata tables, samples/, sweeps/).
    Nuscenes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    pub format: DataFormat,
    /// Metadata directory name for the nuScenes format.
    pub nuscenes_version: String,
    /// nuScenes only: keep every `every`-th camera image of each split.
    pub every: usize,
    pub input_pattern: PatternKind,
    /// LiDAR neighbors per radar point for `lidar_sampled`.
    pub k: usize,
    /// Point budget for `lidar_uniform`; defaults to each sample's radar count.
    pub n_uniform: Option<usize>,
    /// Neighborhood of the ground-truth radar filter, pixels.
    pub radius_px: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PatternParams::default();
        Self {
            root: None,
            format: DataFormat::Native,
            nuscenes_version: "v1.0-trainval".into(),
            every: 1,
            input_pattern: PatternKind::Radar,
            k: p.k,
            n_uniform: p.n_uniform,
            radius_px: p.radius_px,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `rgb_only`, `early`, `mid`, `late`, `multilayer` or `two_stage`.
    pub variant: String,
    pub rgb_channels: [usize; 4],
    pub decoder_channels: usize,
    pub depth_scale: f32,
    pub init_depth: f32,
    pub max_depth: f32,
    pub seed: u64,
    /// Checkpoint whose matching arrays initialize the model.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        Self {
            variant: "two_stage".into(),
            rgb_channels: n.rgb_channels,
            decoder_channels: n.decoder_channels,
            depth_scale: n.depth_scale,
            init_depth: n.init_depth,
            max_depth: n.max_depth,
            seed: n.seed,
            pretrained: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Edge-aware smoothness on the coarse prediction (two-stage only).
    pub smoothness: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            lr_decay: t.lr_decay,
            lr_step: t.lr_step,
            seed: t.seed,
            max_steps: t.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: Split::Val }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.data.every == 0 {
            return Err(CliError::config("data.every must be at least 1"));
        }
        self.variant()?;
        self.network().validate()?;
        self.filter.validate()?;
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn variant(&self) -> CliResult<Variant> {
        let v: Variant = self.model.variant.parse()?;
        match (v, self.loss.smoothness) {
            (Variant::TwoStage { smoothness }, Some(s)) => {
                if self.model.variant != "two_stage" && smoothness != s {
                    return Err(CliError::config(format!(
                        "model.variant = {:?} contradicts loss.smoothness = {s}",
                        self.model.variant
                    )));
                }
                Ok(Variant::TwoStage { smoothness: s })
            }
            (Variant::TwoStage { .. }, None) | (_, None) => Ok(v),
            (_, Some(_)) => Err(CliError::config("loss.smoothness applies only to two_stage models")),
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            rgb_channels: self.model.rgb_channels,
            decoder_channels: self.model.decoder_channels,
            depth_scale: self.model.depth_scale,
            init_depth: self.model.init_depth,
            max_depth: self.model.max_depth,
            seed: self.model.seed,
        }
    }

    pub fn pattern(&self) -> PatternParams {
        PatternParams {
            k: self.data.k,
            n_uniform: self.data.n_uniform,
            radius_px: self.data.radius_px,
            threshold: self.filter,
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            lr_decay: t.lr_decay,
            lr_step: t.lr_step,
            variant: self.variant()?,
            input_pattern: self.data.input_pattern,
            pattern: self.pattern(),
            seed: t.seed,
            max_steps: t.max_steps,
        })
    }

    /// Dataset root: the environment variable, else `data.root`.
    pub fn data_root(&self) -> CliResult<PathBuf> {
        if let Some(v) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(v));
        }
        self.data
            .root
            .clone()
            .ok_or_else(|| CliError::config(format!("data.root is not set (set it in the config, with --set, or via {DATA_ROOT_ENV})")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, expr: &str) -> CliResult<()> {
    let (key, raw) = expr
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {expr:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

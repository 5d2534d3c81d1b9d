//! Training configuration files (TOML). Any key left out takes the default
//! for the model kind; see `configs/` for fully spelled-out examples.

use std::path::{Path, PathBuf};

use gmd_core::denoiser::PredictionTarget;
use gmd_core::engine::TrainConfig;
use gmd_core::projection::recommended_c;
use gmd_core::{DenoiserConfig, ScheduleDescriptor, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelKind;
use crate::error::{io_err, CliError, CliResult};
use crate::inputs::parse_toml;

pub const VERSION: u32 = 1;
pub const FULL_SCALE_TOTAL_SAMPLES: usize = 32_000_000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_channels: Option<usize>,
    pub channel_multipliers: Option<Vec<f64>>,
    pub groups: Option<usize>,
    pub prediction_target: Option<PredictionTarget>,
    pub cond_dim: Option<usize>,
    pub time_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

fn default_kind() -> String {
    "cosine".into()
}
fn default_steps() -> usize {
    1000
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: default_kind(), steps: default_steps(), beta_start: None, beta_end: None }
    }
}

impl ScheduleSection {
    pub fn descriptor(&self) -> CliResult<ScheduleDescriptor> {
        let kind = match self.kind.as_str() {
            "cosine" => ScheduleKind::Cosine,
            "linear" => ScheduleKind::Linear {
                beta_start: self.beta_start.unwrap_or(1e-4),
                beta_end: self.beta_end.unwrap_or(0.02),
            },
            other => return Err(CliError::usage(format!("schedule.kind: unknown schedule {other:?} (cosine or linear)"))),
        };
        Ok(ScheduleDescriptor { kind, steps: self.steps })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip_norm: Option<f64>,
    pub ema_beta: Option<f64>,
    pub total_samples: Option<usize>,
    pub loss_scale_k: Option<f64>,
    pub seed: Option<u64>,
    pub cond_dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    /// Emphasis scale; the default gives the trajectory half the variance.
    pub c: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub version: u32,
    /// `GMDD` dataset produced by `generate-dataset`.
    pub dataset: PathBuf,
    /// Output checkpoint, rewritten every `checkpoint_every` steps.
    pub checkpoint: PathBuf,
    /// Per-step loss log; defaults to the checkpoint path with a `.csv` extension.
    pub log: Option<PathBuf>,
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Motion models only.
    pub projection: Option<ProjectionSection>,
}

fn default_every() -> usize {
    1000
}

/// A training file with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedTraining {
    pub kind: ModelKind,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub checkpoint_every: usize,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleDescriptor,
    pub train: TrainConfig,
    /// `(c, seed)` for motion models.
    pub projection: Option<(f64, u64)>,
}

impl TrainFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let f: TrainFile = parse_toml(path, &text)?;
        if f.version != VERSION {
            return Err(CliError::usage(format!(
                "{}: version: unsupported config version {} (expected {VERSION})",
                path.display(),
                f.version
            )));
        }
        Ok(f)
    }

    /// Paths are taken relative to `base` (the config file's directory).
    pub fn resolve(&self, kind: ModelKind, channels: usize, labels: usize, base: &Path) -> CliResult<ResolvedTraining> {
        let mut d = match kind {
            ModelKind::Trajectory => DenoiserConfig::trajectory(channels, labels),
            ModelKind::Motion => DenoiserConfig::motion(channels, labels),
        };
        let m = &self.model;
        d.base_channels = m.base_channels.unwrap_or(d.base_channels);
        d.channel_multipliers = m.channel_multipliers.clone().unwrap_or(d.channel_multipliers);
        d.groups = m.groups.unwrap_or(d.groups);
        d.prediction_target = m.prediction_target.unwrap_or(d.prediction_target);
        d.cond_dim = m.cond_dim.unwrap_or(d.cond_dim);
        d.time_dim = m.time_dim.unwrap_or(d.time_dim);
        d.validate().map_err(|e| CliError::usage(format!("model: {e}")))?;

        let t = &self.train;
        let base_train = TrainConfig {
            batch_size: match kind {
                ModelKind::Trajectory => 512,
                ModelKind::Motion => 64,
            },
            total_samples: FULL_SCALE_TOTAL_SAMPLES,
            ..TrainConfig::default()
        };
        let train = TrainConfig {
            batch_size: t.batch_size.unwrap_or(base_train.batch_size),
            lr: t.lr.unwrap_or(base_train.lr),
            weight_decay: t.weight_decay.unwrap_or(base_train.weight_decay),
            grad_clip_norm: t.grad_clip_norm.unwrap_or(base_train.grad_clip_norm),
            ema_beta: t.ema_beta.unwrap_or(base_train.ema_beta),
            total_samples: t.total_samples.unwrap_or(base_train.total_samples),
            loss_scale_k: t.loss_scale_k.unwrap_or(base_train.loss_scale_k),
            seed: t.seed.unwrap_or(base_train.seed),
            cond_dropout: t.cond_dropout.unwrap_or(base_train.cond_dropout),
            ..base_train
        };
        train.validate().map_err(|e| CliError::usage(format!("train: {e}")))?;

        let projection = match (kind, &self.projection) {
            (ModelKind::Trajectory, Some(_)) => {
                return Err(CliError::usage("projection: trajectory models are not projected"));
            }
            (ModelKind::Trajectory, None) => None,
            (ModelKind::Motion, p) => {
                let p = p.clone().unwrap_or_default();
                Some((p.c.unwrap_or_else(|| recommended_c(channels)), p.seed.unwrap_or(0)))
            }
        };
        if self.checkpoint_every == 0 {
            return Err(CliError::usage("checkpoint_every: must be positive"));
        }
        let checkpoint = base.join(&self.checkpoint);
        Ok(ResolvedTraining {
            kind,
            dataset: base.join(&self.dataset),
            log: self.log.as_ref().map(|l| base.join(l)).unwrap_or_else(|| checkpoint.with_extension("csv")),
            checkpoint,
            checkpoint_every: self.checkpoint_every,
            denoiser: d,
            schedule: self.schedule.descriptor()?,
            train,
            projection,
        })
    }
}

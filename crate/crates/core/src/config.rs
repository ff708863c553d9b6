//! Run configuration, read from and written to TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdm::{MaskingConfig, Quotas};
use crate::model::MultiwayConfig;
use crate::repurpose::{CaptionMasking, FinetuneConfig};
use crate::training::{AdamW, PretrainConfig, UpdateConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MWT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: MultiwayConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
}

/// Pretraining corpora: a text file with one sentence per line, a list of
/// raster image paths one per line, and a tab-separated `image<TAB>caption`
/// file. Relative paths are taken from the directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    /// Seed of the fixed visual codebook that supplies image targets.
    #[serde(default)]
    pub codebook_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub quotas: Quotas,
    pub update: UpdateConfig,
    #[serde(default)]
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    FusionCls,
    TwoPairCls,
    Retrieval,
    Caption,
    Classify,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::FusionCls, Task::TwoPairCls, Task::Retrieval, Task::Caption, Task::Classify];

    pub fn name(self) -> &'static str {
        match self {
            Task::FusionCls => "fusion-cls",
            Task::TwoPairCls => "two-pair-cls",
            Task::Retrieval => "retrieval",
            Task::Caption => "caption",
            Task::Classify => "classify",
        }
    }

    /// Stochastic depth rate used when the config leaves it unset.
    pub fn default_drop_path(self) -> f64 {
        match self {
            Task::Retrieval | Task::Caption => 0.3,
            Task::FusionCls | Task::TwoPairCls | Task::Classify => 0.4,
        }
    }

    pub fn default_label_smoothing(self) -> f64 {
        match self {
            Task::Caption | Task::Classify => 0.1,
            _ => 0.0,
        }
    }

    pub fn default_layer_decay(self) -> f64 {
        match self {
            Task::TwoPairCls => 0.8,
            Task::Retrieval => 0.95,
            Task::Classify => 0.85,
            Task::FusionCls | Task::Caption => 1.0,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<_> = Task::ALL.iter().map(|t| t.name()).collect();
            Error::InvalidArgument(format!("unknown task {s:?}, expected one of {}", names.join(", ")))
        })
    }
}

/// Task finetuning settings. Unset optional values take the task default.
///
/// Data files are tab-separated, one example per line:
/// `fusion-cls` is `image, text, label`; `two-pair-cls` is
/// `image_a, image_b, text, label`; `retrieval` and `caption` are
/// `image, caption`; `classify` is `image, label`. Labels are names from
/// `labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: Task,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_epochs: f64,
    #[serde(default)]
    pub floor_lr: f64,
    #[serde(default = "finetune_adamw")]
    pub adamw: AdamW,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub layer_decay: Option<f64>,
    pub drop_path: Option<f64>,
    pub label_smoothing: Option<f64>,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default)]
    pub caption_masking: CaptionMasking,
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn finetune_adamw() -> AdamW {
    AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.05,
    }
}

fn default_clip() -> f64 {
    3.0
}

fn default_mask_prob() -> f64 {
    0.6
}

fn default_beam() -> usize {
    3
}

fn default_max_len() -> usize {
    16
}

impl FinetuneSection {
    /// Fills every optional value with its task default.
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        s.layer_decay.get_or_insert(self.task.default_layer_decay());
        s.drop_path.get_or_insert(self.task.default_drop_path());
        s.label_smoothing.get_or_insert(self.task.default_label_smoothing());
        s
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        let r = self.resolved();
        FinetuneConfig {
            epochs: r.epochs,
            batch_size: r.batch_size,
            peak_lr: r.peak_lr,
            warmup_epochs: r.warmup_epochs,
            floor_lr: r.floor_lr,
            adamw: r.adamw,
            clip_norm: r.clip_norm,
            layer_decay: r.layer_decay.unwrap_or(1.0),
            drop_path: r.drop_path.unwrap_or(0.0),
            label_smoothing: r.label_smoothing.unwrap_or(0.0),
            mask_prob: r.mask_prob,
            caption_masking: r.caption_masking,
            seed,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().replace('\n', " ")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative paths against its directory
    /// and applying the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("invalid config: "))))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.apply_seed_env()?;
        Ok(config)
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.data.texts, &mut self.data.images, &mut self.data.pairs].into_iter().flatten() {
            fix(p);
        }
        if let Some(f) = &mut self.finetune {
            fix(&mut f.checkpoint);
            fix(&mut f.data);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(p) = &self.pretrain {
            p.update.validate()?;
            if p.quotas.total() == 0 {
                return Err(Error::Config("pretrain quotas are all zero".into()));
            }
        }
        if let Some(f) = &self.finetune {
            f.finetune_config(self.seed).validate()?;
            if f.beam_size == 0 {
                return Err(Error::Config("beam_size must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let p = self
            .pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("missing [pretrain] section".into()))?;
        Ok(PretrainConfig {
            steps: p.steps,
            quotas: p.quotas,
            seed: self.seed,
            update: p.update.clone(),
            masking: self.masking.clone(),
            record_wall_time: p.record_wall_time,
        })
    }

    /// The config with every task default written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.finetune = c.finetune.map(|f| f.resolved());
        c
    }
}

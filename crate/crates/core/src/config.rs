//! Run configuration: one TOML file covering every subcommand.
//!
//! ```toml
//! seed = 0
//! scheme = "sega"          # sega | global | global_ps
//! deterministic = false
//!
//! [paths]
//! vocab = "vocab.txt"
//! corpus = "corpus.txt"
//! examples = "train.examples"
//! task = "task.jsonl"
//! out_dir = "runs/toy"
//!
//! [model]
//! preset = "toy"           # toy | base | large, fields below override it
//! hidden = 64
//! max_len = 128
//!
//! [caps]
//! max_paragraphs = 50
//!
//! [trainer]
//! total_steps = 2000
//! batch_size = 8
//! peak_lr = 3e-3
//!
//! [finetune]
//! lr = 3e-5
//! dev_fraction = 0.1
//! ```
//!
//! Sections `[trainer.masking]`, `[trainer.adam]`, `[probe]`, `[grid]` and
//! `[gradcheck]` take the fields of the matching config types.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::PositionScheme;
use crate::encoder::EncoderConfig;
use crate::finetune::{FinetuneConfig, Grid};
use crate::gradcheck::GradCheckOptions;
use crate::heads::TaskKind;
use crate::mlm::adam::AdamConfig;
use crate::mlm::trainer::TrainerConfig;
use crate::example::MAX_LEN;
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::segmenter::SegmentCaps;
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub examples: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_task: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// An encoder preset with optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    pub max_len: usize,
    pub layer_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            layers: None,
            hidden: None,
            heads: None,
            ffn: None,
            dropout: None,
            max_len: 128,
            layer_norm: true,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self) -> Option<EncoderConfig> {
        let mut e = EncoderConfig::preset(&self.preset)?;
        if let Some(v) = self.layers {
            e.layers = v;
        }
        if let Some(v) = self.hidden {
            e.hidden = v;
        }
        if let Some(v) = self.heads {
            e.heads = v;
        }
        if let Some(v) = self.ffn {
            e.ffn = v;
        }
        if let Some(v) = self.dropout {
            e.dropout = v;
        }
        Some(e)
    }
}

/// Fine-tuning settings; unset fields fall back to the defaults of the task
/// type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamConfig>,
    /// Held-out share of the task file when no dev file is given.
    pub dev_fraction: f64,
    /// Runs the `[grid]` sweep instead of a single configuration.
    pub sweep: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            lr: None,
            batch_size: None,
            epochs: None,
            warmup_fraction: None,
            clip_norm: None,
            adam: None,
            dev_fraction: 0.1,
            sweep: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scheme: PositionScheme,
    pub deterministic: bool,
    pub paths: Paths,
    pub model: ModelSection,
    pub caps: SegmentCaps,
    pub trainer: TrainerConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneSection,
    pub grid: Grid,
    pub gradcheck: GradCheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scheme: PositionScheme::Sega,
            deterministic: false,
            paths: Paths::default(),
            model: ModelSection::default(),
            caps: SegmentCaps::default(),
            trainer: TrainerConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneSection::default(),
            grid: Grid::default(),
            gradcheck: GradCheckOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Copies the top-level seed and determinism flag into every section
    /// that has its own.
    pub fn propagate(&mut self) {
        self.trainer.seed = self.seed;
        self.trainer.deterministic = self.deterministic;
        self.probe.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    /// Every violation, in one list.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match self.model.encoder() {
            Some(e) => errs.extend(e.validate()),
            None => errs.push(format!(
                "model.preset {:?} is not one of toy, base, large",
                self.model.preset
            )),
        }
        if !(3..=MAX_LEN).contains(&self.model.max_len) {
            errs.push(format!("model.max_len {} must be in 3..={MAX_LEN}", self.model.max_len));
        }
        if let Err(e) = self.caps.validate() {
            errs.push(format!("caps: {e}"));
        }
        errs.extend(self.trainer.validate().into_iter().map(|e| format!("trainer: {e}")));
        let ft = self.finetune_config(TaskKind::Classify { num_labels: 2 });
        errs.extend(ft.validate().into_iter().map(|e| format!("finetune: {e}")));
        if !(0.0..1.0).contains(&self.finetune.dev_fraction) {
            errs.push(format!(
                "finetune.dev_fraction {} must be in [0, 1)",
                self.finetune.dev_fraction
            ));
        }
        if !(0.0 < self.probe.train_fraction && self.probe.train_fraction < 1.0) {
            errs.push(format!("probe.train_fraction {} must be in (0, 1)", self.probe.train_fraction));
        }
        if self.probe.steps == 0 || !(self.probe.lr > 0.0) {
            errs.push("probe.steps and probe.lr must be positive".into());
        }
        if !(self.gradcheck.step > 0.0 && self.gradcheck.tolerance > 0.0) {
            errs.push("gradcheck.step and gradcheck.tolerance must be positive".into());
        }
        if self.finetune.sweep {
            let g = &self.grid;
            if g.batch_sizes.is_empty() || g.lrs.is_empty() || g.epochs.is_empty() {
                errs.push("grid needs at least one batch size, lr and epoch count".into());
            }
            if g.batch_sizes.contains(&0) || g.epochs.contains(&0) || g.lrs.iter().any(|&l| !(l > 0.0)) {
                errs.push("grid values must be positive".into());
            }
        }
        errs
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        let mut cfg = ModelConfig::new(
            vocab.len(),
            vocab.specials().sep,
            self.scheme,
            self.model.encoder().unwrap_or_else(EncoderConfig::toy),
        );
        cfg.caps = self.caps;
        cfg
    }

    pub fn finetune_config(&self, kind: TaskKind) -> FinetuneConfig {
        let mut c = FinetuneConfig::for_task(kind);
        let f = &self.finetune;
        c.lr = f.lr.unwrap_or(c.lr);
        c.batch_size = f.batch_size.unwrap_or(c.batch_size);
        c.epochs = f.epochs.unwrap_or(c.epochs);
        c.warmup_fraction = f.warmup_fraction.unwrap_or(c.warmup_fraction);
        c.clip_norm = f.clip_norm.unwrap_or(c.clip_norm);
        c.adam = f.adam.unwrap_or(c.adam);
        c.seed = self.seed;
        c.deterministic = self.deterministic;
        c
    }

    /// TOML text that reproduces this configuration.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

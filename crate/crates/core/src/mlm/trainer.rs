//! The pretraining loop: masking, batched gradients, clipping and Adam.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::{adam_step, clip_global_norm, AdamConfig, AdamState, OptimError};
use super::masking::{apply_masking, MaskingError, MaskingPolicy};
use super::schedule::LinearSchedule;
use crate::checkpoint::{
    self, load_into, read_tensors, write_tensors, CheckpointError, CONFIG_FILE, PARAMS_FILE,
    TRAIN_STATE_FILE,
};
use crate::example::{Example, Labels, IGNORE_LABEL};
use crate::model::{MlmStats, ModelConfig, ModelError, PretrainModel};
use crate::parallel::chunked_fold;
use crate::params::{NamedTensors, ParamSet};
use crate::scalar::Scalar;
use crate::tokenizer::SpecialIds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Examples per gradient chunk. Chunks are the unit of parallelism and
    /// are reduced in order, so results do not depend on the thread count.
    pub chunk_size: usize,
    /// Number of recent metric records kept in the train state.
    pub metrics_window: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub adam: AdamConfig,
    pub masking: MaskingPolicy,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_fraction: 0.01,
            clip_norm: 1.0,
            checkpoint_every: 0,
            chunk_size: 4,
            metrics_window: 100,
            seed: 0,
            deterministic: false,
            adam: AdamConfig::default(),
            masking: MaskingPolicy::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.masking.validate();
        if self.batch_size == 0 {
            errs.push("trainer.batch_size must be positive".into());
        }
        if self.chunk_size == 0 {
            errs.push("trainer.chunk_size must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            errs.push(format!("trainer.peak_lr = {} must be positive", self.peak_lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            errs.push(format!(
                "trainer.warmup_fraction = {} is not in [0, 1]",
                self.warmup_fraction
            ));
        }
        if self.clip_norm < 0.0 {
            errs.push("trainer.clip_norm must be non-negative".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            errs.push("trainer.adam betas must be in [0, 1)".into());
        }
        if a.eps <= 0.0 || a.weight_decay < 0.0 {
            errs.push("trainer.adam eps must be positive and weight_decay non-negative".into());
        }
        errs
    }

    pub fn schedule(&self) -> LinearSchedule {
        if self.warmup_fraction == 0.01 {
            LinearSchedule::one_percent_warmup(self.total_steps, self.peak_lr)
        } else {
            LinearSchedule::with_warmup_fraction(self.total_steps, self.warmup_fraction, self.peak_lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub masked_acc: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no trainable examples")]
    NoExamples,
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {0} is not a pretraining checkpoint")]
    WrongCheckpoint(PathBuf),
}

/// Optimizer progress plus recent metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub adam: AdamState<T>,
    pub metrics: VecDeque<MetricRecord>,
}

pub const PURPOSE_MASK: u64 = 1;
pub const PURPOSE_DROPOUT: u64 = 2;
pub const PURPOSE_SHUFFLE: u64 = 3;
pub const PURPOSE_EVAL: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An independent stream for one `(seed, step, slot, purpose)` tuple.
pub fn derive_rng(seed: u64, step: u64, slot: u64, purpose: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for x in [step, slot, purpose] {
        h = splitmix(h ^ x);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Examples that have at least one maskable position.
pub fn trainable(examples: Vec<Example>, specials: &SpecialIds) -> Vec<Example> {
    examples
        .into_iter()
        .filter(|ex| (0..ex.active_len()).any(|i| !specials.contains(ex.ids[i])))
        .collect()
}

/// Mean MLM loss and accuracy of `model` over `examples` with masks drawn
/// from `seed`, independent of any training run.
pub fn evaluate<T: Scalar>(
    model: &PretrainModel<T>,
    examples: &[Example],
    policy: &MaskingPolicy,
    specials: &SpecialIds,
    seed: u64,
) -> Result<MlmStats, TrainError> {
    let mut stats = MlmStats::default();
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = derive_rng(seed, 0, i as u64, PURPOSE_EVAL);
        let (masked, _) = apply_masking(ex, policy, specials, model.config.vocab_size, &mut rng)?;
        if labeled(&masked) == 0 {
            continue;
        }
        stats.merge(&model.loss(&masked)?);
    }
    Ok(stats)
}

fn labeled(ex: &Example) -> usize {
    match &ex.labels {
        Labels::Mlm(l) => l.iter().filter(|&&x| x != IGNORE_LABEL).count(),
        _ => 0,
    }
}

pub struct Trainer<T: Scalar> {
    pub model: PretrainModel<T>,
    pub state: TrainState<T>,
    pub config: TrainerConfig,
    specials: SpecialIds,
    data: Vec<Example>,
    schedule: LinearSchedule,
    /// Written as `config.toml` into every checkpoint.
    snapshot: String,
    perm: Option<(u64, Vec<usize>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: PretrainModel<T>,
        config: TrainerConfig,
        data: Vec<Example>,
        specials: SpecialIds,
    ) -> Result<Self, TrainError> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(TrainError::InvalidConfig(errs.join("; ")));
        }
        let data = trainable(data, &specials);
        if data.is_empty() && config.total_steps > 0 {
            return Err(TrainError::NoExamples);
        }
        let state = TrainState {
            step: 0,
            total_steps: config.total_steps,
            seed: config.seed,
            adam: AdamState::new(&model),
            metrics: VecDeque::new(),
        };
        Ok(Self {
            schedule: config.schedule(),
            model,
            state,
            config,
            specials,
            data,
            snapshot: String::new(),
            perm: None,
        })
    }

    pub fn with_snapshot(mut self, snapshot: String) -> Self {
        self.snapshot = snapshot;
        self
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    fn example_index(&mut self, flat: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = flat / n;
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            idx.shuffle(&mut derive_rng(self.config.seed, epoch, 0, PURPOSE_SHUFFLE));
            self.perm = Some((epoch, idx));
        }
        self.perm.as_ref().unwrap().1[(flat % n) as usize]
    }

    /// The masked batch of update `step` (1-based).
    pub fn batch(&mut self, step: u64) -> Result<Vec<Example>, TrainError> {
        let b = self.config.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        for j in 0..b {
            let idx = self.example_index((step - 1) * b + j);
            let mut rng = derive_rng(self.config.seed, step, j, PURPOSE_MASK);
            let (masked, _) = apply_masking(
                &self.data[idx],
                &self.config.masking,
                &self.specials,
                self.model.config.vocab_size,
                &mut rng,
            )?;
            out.push(masked);
        }
        Ok(out)
    }

    fn gradients(&self, batch: &[Example], step: u64) -> Result<(PretrainModel<T>, MlmStats), TrainError> {
        let count: usize = batch.iter().map(labeled).sum();
        let scale = T::one() / T::lit(count.max(1) as f64);
        let seed = self.config.seed;
        let model = &self.model;
        let run_chunk = |start: usize, xs: &[Example]| -> Result<(PretrainModel<T>, MlmStats), ModelError> {
            let mut g = model.zeros_like();
            let mut stats = MlmStats::default();
            for (k, ex) in xs.iter().enumerate() {
                if labeled(ex) == 0 {
                    continue;
                }
                let mut rng = derive_rng(seed, step, (start + k) as u64, PURPOSE_DROPOUT);
                let s = model.accumulate_grad(ex, scale, Some(&mut rng), &mut g)?;
                stats.merge(&s);
            }
            Ok((g, stats))
        };
        let total = chunked_fold(
            batch,
            self.config.chunk_size,
            !self.config.deterministic,
            run_chunk,
            |(tg, ts), (g, s)| {
                tg.axpy(T::one(), &g);
                ts.merge(&s);
            },
        )?;
        Ok(total.unwrap_or_else(|| (model.zeros_like(), MlmStats::default())))
    }

    /// Runs one update and returns its metric record.
    pub fn step(&mut self) -> Result<MetricRecord, TrainError> {
        let start = Instant::now();
        let step = self.state.step + 1;
        let batch = self.batch(step)?;
        let (mut grads, stats) = self.gradients(&batch, step)?;
        if !grads.all_finite() {
            let name = grads
                .params()
                .into_iter()
                .find(|(_, m)| !m.all_finite())
                .map(|(n, _)| n)
                .unwrap_or_default();
            return Err(OptimError::NonFiniteGradient(name).into());
        }
        clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = self.schedule.at(step);
        adam_step(&mut self.model, &grads, &mut self.state.adam, &self.config.adam, lr)?;
        self.state.step = step;
        let rec = MetricRecord {
            step,
            lr,
            loss: stats.mean_loss(),
            masked_acc: stats.accuracy(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.state.metrics.push_back(rec.clone());
        while self.state.metrics.len() > self.config.metrics_window {
            self.state.metrics.pop_front();
        }
        Ok(rec)
    }

    /// Trains to `total_steps`, appending metrics to `out_dir/metrics.jsonl`
    /// and writing checkpoints under `out_dir`. Returns the final checkpoint
    /// directory.
    pub fn run(
        &mut self,
        out_dir: &Path,
        mut on_record: impl FnMut(&MetricRecord),
    ) -> Result<PathBuf, TrainError> {
        checkpoint::create_dir(out_dir)?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let io = |source| TrainError::Io {
            path: metrics_path.clone(),
            source,
        };
        let mut log: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(io)?;
        while !self.done() {
            let rec = self.step()?;
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}").map_err(io)?;
            on_record(&rec);
            let k = self.config.checkpoint_every;
            if k > 0 && rec.step % k == 0 && !self.done() {
                self.save(&step_dir(out_dir, rec.step))?;
            }
        }
        log.flush().map_err(io)?;
        let last = step_dir(out_dir, self.state.step);
        self.save(&last)?;
        let final_dir = out_dir.join("final");
        self.save(&final_dir)?;
        Ok(final_dir)
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        save_pretrain(dir, &self.model, &self.snapshot)?;
        let meta = serde_json::json!({
            "step": self.state.step,
            "total_steps": self.state.total_steps,
            "seed": self.state.seed,
            "adam_step": self.state.adam.step,
            "trainer": self.config,
            "metrics": self.state.metrics,
        });
        let tensors: Vec<(String, &crate::tensor::Matrix<T>)> = self
            .state
            .adam
            .m
            .params()
            .into_iter()
            .map(|(n, m)| (format!("m.{n}"), m))
            .chain(
                self.state
                    .adam
                    .v
                    .params()
                    .into_iter()
                    .map(|(n, m)| (format!("v.{n}"), m)),
            )
            .collect();
        write_tensors(dir.join(TRAIN_STATE_FILE), &meta, &tensors)?;
        Ok(())
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`], with
    /// the trainer settings stored in it.
    pub fn resume(dir: &Path, data: Vec<Example>, specials: SpecialIds) -> Result<Self, TrainError> {
        let model = load_pretrain::<T>(dir)?;
        let (meta, tensors) = read_tensors::<T>(dir.join(TRAIN_STATE_FILE))?;
        let bad = || TrainError::WrongCheckpoint(dir.to_path_buf());
        let config: TrainerConfig =
            serde_json::from_value(meta["trainer"].clone()).map_err(|_| bad())?;
        let metrics: VecDeque<MetricRecord> =
            serde_json::from_value(meta["metrics"].clone()).map_err(|_| bad())?;
        let step = meta["step"].as_u64().ok_or_else(bad)?;
        let adam_step_count = meta["adam_step"].as_u64().ok_or_else(bad)?;
        let split = |prefix: &str| {
            NamedTensors(
                tensors
                    .0
                    .iter()
                    .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone())))
                    .collect(),
            )
        };
        let mut adam = AdamState::new(&model);
        load_into(&mut adam.m, &split("m."), false)?;
        load_into(&mut adam.v, &split("v."), false)?;
        adam.step = adam_step_count;
        let snapshot = checkpoint::read_text(&dir.join(CONFIG_FILE)).unwrap_or_default();
        let mut t = Trainer::new(model, config, data, specials)?.with_snapshot(snapshot);
        t.state.step = step;
        t.state.adam = adam;
        t.state.metrics = metrics;
        Ok(t)
    }
}

pub fn step_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step-{step:06}"))
}

/// Writes `params.bin` and `config.toml` of a pretraining model.
pub fn save_pretrain<T: Scalar>(
    dir: &Path,
    model: &PretrainModel<T>,
    snapshot: &str,
) -> Result<(), CheckpointError> {
    checkpoint::create_dir(dir)?;
    let meta = serde_json::json!({
        "kind": "pretrain",
        "model": model.config,
        "layer_norm": model.backbone.embeddings.layer_norm,
    });
    write_tensors(dir.join(PARAMS_FILE), &meta, &model.params())?;
    checkpoint::write_text(&dir.join(CONFIG_FILE), snapshot)
}

/// Reads the model config stored in a checkpoint's parameter file.
pub fn checkpoint_model_config(dir: &Path) -> Result<(String, ModelConfig), TrainError> {
    let (meta, _) = read_tensors::<f64>(dir.join(PARAMS_FILE))?;
    let bad = || TrainError::WrongCheckpoint(dir.to_path_buf());
    let kind = meta["kind"].as_str().ok_or_else(bad)?.to_string();
    let cfg = serde_json::from_value(meta["model"].clone()).map_err(|_| bad())?;
    Ok((kind, cfg))
}

pub fn load_pretrain<T: Scalar>(dir: &Path) -> Result<PretrainModel<T>, TrainError> {
    let (meta, tensors) = read_tensors::<T>(dir.join(PARAMS_FILE))?;
    let bad = || TrainError::WrongCheckpoint(dir.to_path_buf());
    if meta["kind"] != "pretrain" {
        return Err(bad());
    }
    let cfg: ModelConfig = serde_json::from_value(meta["model"].clone()).map_err(|_| bad())?;
    let mut model = PretrainModel::zeros(cfg);
    model.backbone.embeddings.layer_norm = meta["layer_norm"].as_bool().unwrap_or(true);
    load_into(&mut model, &tensors, false)?;
    Ok(model)
}

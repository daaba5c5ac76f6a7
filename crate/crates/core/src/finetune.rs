//! The fine-tuning loop, task metrics and fine-tuned checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, load_into, read_tensors, write_tensors, CheckpointError, CONFIG_FILE, PARAMS_FILE};
use crate::embeddings::PositionScheme;
use crate::example::{Example, ExampleKind, Labels, Packer};
use crate::heads::{FinetuneModel, HeadError, Prediction, TaskKind};
use crate::metrics;
use crate::mlm::adam::{adam_step, clip_global_norm, AdamConfig, AdamState, OptimError};
use crate::mlm::schedule::LinearSchedule;
use crate::mlm::trainer::{checkpoint_model_config, derive_rng, load_pretrain, TrainError, PURPOSE_DROPOUT, PURPOSE_SHUFFLE};
use crate::model::{Backbone, ModelConfig};
use crate::parallel::chunked_fold;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tasks::{build_classification, build_spans, SpanInstance, TaskData, TaskError};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("checkpoint uses the {checkpoint} scheme but {requested} was requested")]
    SchemeMismatch {
        checkpoint: &'static str,
        requested: &'static str,
    },
    #[error("example {index} breaks the input layout: {message}")]
    Layout { index: usize, message: String },
    #[error("no training examples")]
    NoExamples,
    #[error("invalid fine-tuning config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{0} is not a fine-tuned checkpoint")]
    WrongCheckpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub chunk_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::classification()
    }
}

impl FinetuneConfig {
    pub fn classification() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 256,
            epochs: 3,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            chunk_size: 4,
            seed: 0,
            deterministic: false,
            adam: AdamConfig::default(),
        }
    }

    pub fn span() -> Self {
        Self {
            batch_size: 128,
            epochs: 4,
            ..Self::classification()
        }
    }

    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Span => Self::span(),
            _ => Self::classification(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            errs.push(format!("warmup_fraction must be in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            errs.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.chunk_size == 0 {
            errs.push("chunk_size must be positive".into());
        }
        errs
    }

    pub fn steps_per_epoch(&self, examples: usize) -> u64 {
        examples.div_ceil(self.batch_size.max(1)) as u64
    }
}

/// Hyperparameter sweep over batch size, learning rate and epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub batch_sizes: Vec<usize>,
    pub lrs: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![16, 24, 32],
            lrs: vec![2e-5, 3e-5, 5e-5],
            epochs: (3..=10).collect(),
        }
    }
}

impl Grid {
    pub fn configs(&self, base: &FinetuneConfig) -> Vec<FinetuneConfig> {
        let mut out = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &lr in &self.lrs {
                for &epochs in &self.epochs {
                    out.push(FinetuneConfig {
                        batch_size,
                        lr,
                        epochs,
                        ..*base
                    });
                }
            }
        }
        out
    }
}

/// Packed task examples; span examples keep what answer decoding needs.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSet {
    Classification(Vec<Example>),
    Span(Vec<SpanInstance>),
}

impl TaskSet {
    pub fn build(data: &TaskData, vocab: &Vocab, packer: &Packer, kind: TaskKind) -> Result<(Self, usize), TaskError> {
        match data {
            TaskData::Classification(rs) => Ok((Self::Classification(build_classification(rs, vocab, packer, kind)?), 0)),
            TaskData::Span(rs) => {
                let (xs, dropped) = build_spans(rs, vocab, packer)?;
                Ok((Self::Span(xs), dropped))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskSet::Classification(x) => x.len(),
            TaskSet::Span(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> Vec<Example> {
        match self {
            TaskSet::Classification(x) => x.clone(),
            TaskSet::Span(x) => x.iter().map(|s| s.example.clone()).collect(),
        }
    }

    /// Shuffles with `seed` and moves the last `fraction` into a dev set.
    pub fn split(self, fraction: f64, seed: u64) -> (TaskSet, TaskSet) {
        fn cut<E>(mut v: Vec<E>, fraction: f64, seed: u64) -> (Vec<E>, Vec<E>) {
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let dev = ((v.len() as f64 * fraction).round() as usize).min(v.len().saturating_sub(1));
            let tail = v.split_off(v.len() - dev);
            (v, tail)
        }
        match self {
            TaskSet::Classification(v) => {
                let (a, b) = cut(v, fraction, seed);
                (TaskSet::Classification(a), TaskSet::Classification(b))
            }
            TaskSet::Span(v) => {
                let (a, b) = cut(v, fraction, seed);
                (TaskSet::Span(a), TaskSet::Span(b))
            }
        }
    }
}

/// Every metric that applies to the task; the others stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub examples: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matthews: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
}

impl TaskMetrics {
    /// Accuracy, Pearson or span F1, whichever applies.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.pearson).or(self.f1).unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

fn expected_kind(task: TaskKind, kind: ExampleKind) -> bool {
    match task {
        TaskKind::Span => kind == ExampleKind::Span,
        _ => matches!(kind, ExampleKind::PairClassify | ExampleKind::SingleClassify),
    }
}

/// Rejects examples whose kind or index layout does not fit the task.
pub fn check_layout(examples: &[Example], task: TaskKind, sep: u32) -> Result<(), FinetuneError> {
    for (index, ex) in examples.iter().enumerate() {
        if !expected_kind(task, ex.kind) {
            return Err(FinetuneError::Layout {
                index,
                message: format!("{:?} example for a {task:?} task", ex.kind),
            });
        }
        if let Some(message) = ex.layout_violation(sep) {
            return Err(FinetuneError::Layout { index, message });
        }
    }
    Ok(())
}

/// Fresh task head on a pretrained backbone. `requested`, when given, must
/// match the checkpoint's scheme.
pub fn load_backbone<T: Scalar>(
    dir: &Path,
    requested: Option<PositionScheme>,
) -> Result<(ModelConfig, Backbone<T>), FinetuneError> {
    let (_, cfg) = checkpoint_model_config(dir)?;
    if let Some(r) = requested {
        if r != cfg.scheme {
            return Err(FinetuneError::SchemeMismatch {
                checkpoint: cfg.scheme.name(),
                requested: r.name(),
            });
        }
    }
    let model = load_pretrain::<T>(dir)?;
    Ok((model.config, model.backbone))
}

/// Mean loss over one batch and the gradient of that mean.
fn batch_gradients<T: Scalar>(
    model: &FinetuneModel<T>,
    batch: &[&Example],
    cfg: &FinetuneConfig,
    step: u64,
) -> Result<(FinetuneModel<T>, f64), FinetuneError> {
    let scale = T::one() / T::lit(batch.len().max(1) as f64);
    let run = |start: usize, xs: &[&Example]| -> Result<(FinetuneModel<T>, f64), HeadError> {
        let mut g = model.zeros_like();
        let mut loss = 0.0;
        for (k, ex) in xs.iter().enumerate() {
            let mut rng = derive_rng(cfg.seed, step, (start + k) as u64, PURPOSE_DROPOUT);
            loss += model.accumulate_grad(ex, scale, Some(&mut rng), &mut g)?.0;
        }
        Ok((g, loss))
    };
    let total = chunked_fold(batch, cfg.chunk_size, !cfg.deterministic, run, |(tg, tl), (g, l)| {
        tg.axpy(T::one(), &g);
        *tl += l;
    })?;
    let (g, loss) = total.unwrap_or_else(|| (model.zeros_like(), 0.0));
    Ok((g, loss / batch.len().max(1) as f64))
}

/// Trains `model` on `train` for `cfg.epochs` epochs with linear warmup
/// and decay, calling `on_epoch` after each epoch.
pub fn finetune<T: Scalar>(
    model: &mut FinetuneModel<T>,
    train: &[Example],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>, FinetuneError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(FinetuneError::InvalidConfig(errs));
    }
    if train.is_empty() {
        return Err(FinetuneError::NoExamples);
    }
    check_layout(train, model.task, model.config.sep_id)?;
    let per_epoch = cfg.steps_per_epoch(train.len());
    let schedule = LinearSchedule::with_warmup_fraction(per_epoch * cfg.epochs as u64, cfg.warmup_fraction, cfg.lr);
    let mut adam = AdamState::new(&*model);
    let mut step = 0u64;
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, epoch as u64, 0, PURPOSE_SHUFFLE));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let (mut g, loss) = batch_gradients(model, &batch, cfg, step)?;
            loss_sum += loss * batch.len() as f64;
            if !g.all_finite() {
                let name = g
                    .params()
                    .into_iter()
                    .find(|(_, m)| !m.all_finite())
                    .map(|(n, _)| n)
                    .unwrap_or_default();
                return Err(OptimError::NonFiniteGradient(name).into());
            }
            clip_global_norm(&mut g, cfg.clip_norm);
            lr = schedule.at(step);
            adam_step(model, &g, &mut adam, &cfg.adam, lr)?;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            step,
            lr,
            loss: loss_sum / train.len() as f64,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Inference-mode predictions and metrics on `data`.
pub fn evaluate_task<T: Scalar>(model: &FinetuneModel<T>, data: &TaskSet) -> Result<TaskMetrics, FinetuneError> {
    let examples = data.examples();
    check_layout(&examples, model.task, model.config.sep_id)?;
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for ex in &examples {
        let (l, p) = model.run_inference(ex)?;
        loss += l;
        preds.push(p);
    }
    let n = examples.len();
    let mut m = TaskMetrics {
        examples: n,
        loss: if n == 0 { 0.0 } else { loss / n as f64 },
        ..TaskMetrics::default()
    };
    match (model.task, data) {
        (TaskKind::Classify { num_labels }, _) => {
            let pred: Vec<u32> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Class { label, .. } => *label,
                    _ => 0,
                })
                .collect();
            let gold: Vec<u32> = examples
                .iter()
                .map(|x| match x.labels {
                    Labels::Class(y) => y,
                    _ => 0,
                })
                .collect();
            m.accuracy = Some(metrics::accuracy(&pred, &gold));
            m.matthews = Some(metrics::matthews(&pred, &gold));
            if num_labels == 2 {
                m.f1 = Some(metrics::binary_f1(&pred, &gold, 1));
            }
        }
        (TaskKind::Regress, _) => {
            let pred: Vec<f64> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Score(s) => *s,
                    _ => 0.0,
                })
                .collect();
            let gold: Vec<f64> = examples
                .iter()
                .map(|x| match x.labels {
                    Labels::Score(y) => f64::from(y),
                    _ => 0.0,
                })
                .collect();
            m.pearson = Some(metrics::pearson(&pred, &gold));
            m.spearman = Some(metrics::spearman(&pred, &gold));
        }
        (TaskKind::Span, TaskSet::Span(insts)) => {
            let mut em = 0.0;
            let mut f1 = 0.0;
            for (inst, p) in insts.iter().zip(&preds) {
                let text = match p {
                    Prediction::Span { start, end } => inst.answer_between(*start, *end),
                    _ => String::new(),
                };
                em += metrics::exact_match(&text, &inst.answer_text);
                f1 += metrics::squad_f1(&text, &inst.answer_text);
            }
            let d = n.max(1) as f64;
            m.exact_match = Some(em / d);
            m.f1 = Some(f1 / d);
        }
        (TaskKind::Span, TaskSet::Classification(_)) => {}
    }
    Ok(m)
}

/// Fine-tunes a copy of `base` for every grid point and scores it on `dev`.
pub fn sweep<T: Scalar>(
    base: &FinetuneModel<T>,
    train: &[Example],
    dev: &TaskSet,
    configs: &[FinetuneConfig],
) -> Result<Vec<(FinetuneConfig, TaskMetrics)>, FinetuneError> {
    configs
        .iter()
        .map(|cfg| {
            let mut m = base.clone();
            finetune(&mut m, train, cfg, |_| {})?;
            Ok((*cfg, evaluate_task(&m, dev)?))
        })
        .collect()
}

pub fn save_finetune<T: Scalar>(dir: &Path, model: &FinetuneModel<T>, snapshot: &str) -> Result<(), CheckpointError> {
    checkpoint::create_dir(dir)?;
    let meta = serde_json::json!({
        "kind": "finetune",
        "model": model.config,
        "task": model.task,
        "layer_norm": model.backbone.embeddings.layer_norm,
    });
    write_tensors(dir.join(PARAMS_FILE), &meta, &model.params())?;
    checkpoint::write_text(&dir.join(CONFIG_FILE), snapshot)
}

pub fn load_finetune<T: Scalar>(dir: &Path, vocab: &Vocab) -> Result<FinetuneModel<T>, FinetuneError> {
    let (meta, tensors) = read_tensors::<T>(dir.join(PARAMS_FILE))?;
    let bad = || FinetuneError::WrongCheckpoint(dir.display().to_string());
    if meta["kind"] != "finetune" {
        return Err(bad());
    }
    let cfg: ModelConfig = serde_json::from_value(meta["model"].clone()).map_err(|_| bad())?;
    let task: TaskKind = serde_json::from_value(meta["task"].clone()).map_err(|_| bad())?;
    let mut model = FinetuneModel::zeros(cfg, task, vocab.specials());
    model.backbone.embeddings.layer_norm = meta["layer_norm"].as_bool().unwrap_or(true);
    load_into(&mut model, &tensors, false)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::segmenter::SegmentCaps;
    use crate::synth;
    use crate::tasks::parse_task;

    fn toy_pair_model(seed: u64, n: usize) -> (FinetuneModel<f32>, TaskSet, Vocab) {
        let vocab = Vocab::parse(&synth::vocab_text()).unwrap();
        let cfg = ModelConfig::new(vocab.len(), vocab.specials().sep, PositionScheme::Sega, EncoderConfig::toy());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&cfg, &mut rng);
        let kind = TaskKind::Classify { num_labels: 2 };
        let model = FinetuneModel::new(cfg, backbone, kind, vocab.specials(), &mut rng);
        let packer = Packer::new(vocab.specials(), SegmentCaps::default(), 32);
        let data = parse_task(&synth::pair_task_jsonl(n, seed)).unwrap();
        let (set, _) = TaskSet::build(&data, &vocab, &packer, kind).unwrap();
        (model, set, vocab)
    }

    #[test]
    fn defaults_follow_task_type() {
        let c = FinetuneConfig::for_task(TaskKind::Classify { num_labels: 2 });
        assert_eq!((c.lr, c.batch_size, c.epochs), (3e-5, 256, 3));
        let s = FinetuneConfig::for_task(TaskKind::Span);
        assert_eq!((s.lr, s.batch_size, s.epochs), (3e-5, 128, 4));
        assert_eq!(Grid::default().configs(&c).len(), 3 * 3 * 8);
        let bad = FinetuneConfig {
            lr: 0.0,
            epochs: 0,
            ..c
        };
        assert_eq!(bad.validate().len(), 2);
    }

    #[test]
    fn separable_pair_task_is_learned_in_three_epochs() {
        let (mut model, set, _) = toy_pair_model(11, 512);
        let cfg = FinetuneConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 3,
            ..FinetuneConfig::classification()
        };
        let recs = finetune(&mut model, &set.examples(), &cfg, |_| {}).unwrap();
        assert_eq!(recs.len(), 3);
        let m = evaluate_task(&model, &set).unwrap();
        assert!(m.accuracy.unwrap() >= 0.95, "{m:?} {recs:?}");
        assert!(m.f1.is_some() && m.matthews.is_some() && m.exact_match.is_none());
    }

    #[test]
    fn threads_do_not_change_the_result() {
        let (model, set, _) = toy_pair_model(12, 64);
        let xs: Vec<Example> = set.examples().into_iter().take(24).collect();
        let cfg = FinetuneConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 1,
            ..FinetuneConfig::classification()
        };
        let mut a = model.clone();
        let mut b = model;
        finetune(&mut a, &xs, &cfg, |_| {}).unwrap();
        finetune(&mut b, &xs, &FinetuneConfig { deterministic: true, ..cfg }, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let (mut model, set, _) = toy_pair_model(13, 64);
        let mut xs = set.examples();
        xs[3].p[1] = 1;
        let err = finetune(&mut model, &xs, &FinetuneConfig::classification(), |_| {}).unwrap_err();
        assert!(matches!(err, FinetuneError::Layout { index: 3, .. }), "{err}");
    }

    #[test]
    fn span_self_prediction_scores_one() {
        let vocab = Vocab::parse(&synth::vocab_text()).unwrap();
        let packer = Packer::new(vocab.specials(), SegmentCaps::default(), 64);
        let data = parse_task(&synth::span_task_jsonl(10, 3)).unwrap();
        let (TaskSet::Span(xs), _) = TaskSet::build(&data, &vocab, &packer, TaskKind::Span).unwrap() else {
            panic!()
        };
        for x in &xs {
            let Labels::Span { start, end } = x.example.labels else { panic!() };
            let text = x.answer_between(start as usize, end as usize);
            assert_eq!(metrics::exact_match(&text, &x.answer_text), 1.0);
            assert_eq!(metrics::squad_f1(&text, &x.answer_text), 1.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_scheme_check() {
        let (model, _, vocab) = toy_pair_model(14, 64);
        let dir = tempfile::tempdir().unwrap();
        save_finetune(dir.path(), &model, "").unwrap();
        let back: FinetuneModel<f32> = load_finetune(dir.path(), &vocab).unwrap();
        assert_eq!(back, model);

        let pre = crate::model::PretrainModel::<f32>::init(model.config, &mut ChaCha8Rng::seed_from_u64(1));
        let pdir = dir.path().join("pre");
        crate::mlm::trainer::save_pretrain(&pdir, &pre, "").unwrap();
        let err = load_backbone::<f32>(&pdir, Some(PositionScheme::Global)).unwrap_err();
        assert!(matches!(err, FinetuneError::SchemeMismatch { .. }));
        let (_, bb) = load_backbone::<f32>(&pdir, Some(PositionScheme::Sega)).unwrap();
        assert_eq!(bb, pre.backbone);
    }
}

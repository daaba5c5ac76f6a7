//! Fine-tuning heads: sequence classification or regression from the
//! pooled `[CLS]` state, and start/end span extraction over context tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::INIT_STD;
use crate::example::{Example, ExampleKind, Labels};
use crate::model::{Backbone, ModelConfig, ModelError};
use crate::params::{prefixed, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{affine, affine_backward, log_sum_exp, softmax_in_place, truncated_normal, Matrix};
use crate::tokenizer::SpecialIds;

/// Longest decoded answer, in tokens past the start.
pub const MAX_ANSWER_LEN: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Classify { num_labels: usize },
    Regress,
    Span,
}

impl TaskKind {
    pub fn outputs(&self) -> usize {
        match self {
            TaskKind::Classify { num_labels } => *num_labels,
            TaskKind::Regress => 1,
            TaskKind::Span => 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("example has no context positions")]
    NoContextPositions,
    #[error("gold span ({start}, {end}) is not on context positions")]
    AnswerNotInContext { start: usize, end: usize },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("example labels {0} do not fit the task")]
    WrongLabels(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Tanh pooler over the `[CLS]` state followed by a linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    pub pooler_weight: Matrix<T>,
    pub pooler_bias: Matrix<T>,
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn zeros(hidden: usize, outputs: usize) -> Self {
        Self {
            pooler_weight: Matrix::zeros(hidden, hidden),
            pooler_bias: Matrix::zeros(1, hidden),
            weight: Matrix::zeros(hidden, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn init(hidden: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut h = Self::zeros(hidden, outputs);
        h.pooler_weight = truncated_normal(hidden, hidden, INIT_STD, rng);
        h.weight = truncated_normal(hidden, outputs, INIT_STD, rng);
        h
    }

    pub fn hidden(&self) -> usize {
        self.pooler_weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }

    /// Raw outputs and the pooled vector for a `1×H` `[CLS]` row.
    fn forward(&self, cls: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let mut pooled = affine(cls, &self.pooler_weight, &self.pooler_bias);
        pooled.data.iter_mut().for_each(|z| *z = z.tanh());
        (affine(&pooled, &self.weight, &self.bias), pooled)
    }

    fn backward(
        &self,
        cls: &Matrix<T>,
        pooled: &Matrix<T>,
        d_out: &Matrix<T>,
        grads: &mut ClassifierHead<T>,
    ) -> Matrix<T> {
        let mut d_pre = affine_backward(pooled, &self.weight, d_out, &mut grads.weight, &mut grads.bias);
        for (d, &y) in d_pre.data.iter_mut().zip(&pooled.data) {
            *d *= T::one() - y * y;
        }
        affine_backward(
            cls,
            &self.pooler_weight,
            &d_pre,
            &mut grads.pooler_weight,
            &mut grads.pooler_bias,
        )
    }
}

impl<T: Scalar> ParamSet<T> for ClassifierHead<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("pooler_weight".into(), &self.pooler_weight),
            ("pooler_bias".into(), &self.pooler_bias),
            ("weight".into(), &self.weight),
            ("bias".into(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        vec![
            ("pooler_weight".into(), &mut self.pooler_weight),
            ("pooler_bias".into(), &mut self.pooler_bias),
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Label distribution (softmax) of a classification head, or the single raw
/// score of a regression head, from final hidden states whose row 0 is
/// `[CLS]`.
pub fn classify<T: Scalar>(hidden: &Matrix<T>, head: &ClassifierHead<T>) -> Result<Vec<T>, HeadError> {
    if hidden.rows == 0 || hidden.cols != head.hidden() {
        return Err(HeadError::ShapeMismatch(format!(
            "hidden states {}x{}, head expects width {}",
            hidden.rows,
            hidden.cols,
            head.hidden()
        )));
    }
    let (mut out, _) = head.forward(&hidden.head_rows(1));
    if head.outputs() > 1 {
        softmax_in_place(&mut out.data);
    }
    Ok(out.data)
}

/// Start and end scoring vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanHead<T> {
    pub start_weight: Matrix<T>,
    pub start_bias: Matrix<T>,
    pub end_weight: Matrix<T>,
    pub end_bias: Matrix<T>,
}

impl<T: Scalar> SpanHead<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            start_weight: Matrix::zeros(hidden, 1),
            start_bias: Matrix::zeros(1, 1),
            end_weight: Matrix::zeros(hidden, 1),
            end_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut h = Self::zeros(hidden);
        h.start_weight = truncated_normal(hidden, 1, INIT_STD, rng);
        h.end_weight = truncated_normal(hidden, 1, INIT_STD, rng);
        h
    }

    pub fn hidden(&self) -> usize {
        self.start_weight.rows
    }

    /// Start and end logits at `positions`.
    pub fn logits(&self, hidden: &Matrix<T>, positions: &[usize]) -> (Vec<T>, Vec<T>) {
        let rows = hidden.gather_rows(positions);
        let s = affine(&rows, &self.start_weight, &self.start_bias);
        let e = affine(&rows, &self.end_weight, &self.end_bias);
        (s.data, e.data)
    }
}

impl<T: Scalar> ParamSet<T> for SpanHead<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("start_weight".into(), &self.start_weight),
            ("start_bias".into(), &self.start_bias),
            ("end_weight".into(), &self.end_weight),
            ("end_bias".into(), &self.end_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        vec![
            ("start_weight".into(), &mut self.start_weight),
            ("start_bias".into(), &mut self.start_bias),
            ("end_weight".into(), &mut self.end_weight),
            ("end_bias".into(), &mut self.end_bias),
        ]
    }
}

/// Real context positions of a span example: paragraph >= 1 and not a
/// structural token (`[UNK]` stays a candidate).
pub fn span_candidates(ex: &Example, specials: &SpecialIds) -> Vec<usize> {
    let structural = |id| id == specials.pad || id == specials.cls || id == specials.sep || id == specials.mask;
    (0..ex.active_len())
        .filter(|&i| ex.p[i] >= 1 && !structural(ex.ids[i]))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanDistributions<T> {
    pub positions: Vec<usize>,
    pub start: Vec<T>,
    pub end: Vec<T>,
}

/// Independent start and end softmaxes over the context positions.
pub fn extract_span<T: Scalar>(
    hidden: &Matrix<T>,
    head: &SpanHead<T>,
    ex: &Example,
    specials: &SpecialIds,
) -> Result<SpanDistributions<T>, HeadError> {
    if hidden.cols != head.hidden() || hidden.rows > ex.max_len() {
        return Err(HeadError::ShapeMismatch(format!(
            "hidden states {}x{}, head expects width {}",
            hidden.rows,
            hidden.cols,
            head.hidden()
        )));
    }
    let positions: Vec<usize> = span_candidates(ex, specials)
        .into_iter()
        .filter(|&i| i < hidden.rows)
        .collect();
    if positions.is_empty() {
        return Err(HeadError::NoContextPositions);
    }
    let (mut start, mut end) = head.logits(hidden, &positions);
    softmax_in_place(&mut start);
    softmax_in_place(&mut end);
    Ok(SpanDistributions { positions, start, end })
}

/// The pair `(s, e)` of candidate positions maximizing
/// `start[s] + end[e]` subject to `s <= e <= s + max_len`. Ties keep the
/// earliest start, then the earliest end.
pub fn best_span<T: Scalar>(
    positions: &[usize],
    start: &[T],
    end: &[T],
    max_len: usize,
) -> Option<(usize, usize)> {
    let mut best: Option<(T, usize, usize)> = None;
    for i in 0..positions.len() {
        for j in i..positions.len() {
            if positions[j] > positions[i] + max_len {
                break;
            }
            let score = start[i] + end[j];
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, positions[i], positions[j]));
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    Classifier(ClassifierHead<T>),
    Span(SpanHead<T>),
}

/// A model's output for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class { label: u32, probs: Vec<f64> },
    Score(f64),
    Span { start: usize, end: usize },
}

/// Backbone plus one task head.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneModel<T> {
    pub config: ModelConfig,
    pub task: TaskKind,
    pub backbone: Backbone<T>,
    pub head: Head<T>,
    pub specials: SpecialIds,
}

fn head_for<T: Scalar>(task: TaskKind, hidden: usize, rng: Option<&mut ChaCha8Rng>) -> Head<T> {
    match (task, rng) {
        (TaskKind::Span, Some(r)) => Head::Span(SpanHead::init(hidden, r)),
        (TaskKind::Span, None) => Head::Span(SpanHead::zeros(hidden)),
        (t, Some(r)) => Head::Classifier(ClassifierHead::init(hidden, t.outputs(), r)),
        (t, None) => Head::Classifier(ClassifierHead::zeros(hidden, t.outputs())),
    }
}

impl<T: Scalar> FinetuneModel<T> {
    /// A fresh head on top of `backbone`.
    pub fn new(
        config: ModelConfig,
        backbone: Backbone<T>,
        task: TaskKind,
        specials: SpecialIds,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            head: head_for(task, config.encoder.hidden, Some(rng)),
            config,
            task,
            backbone,
            specials,
        }
    }

    /// All-zero tensors with the shapes of a model for `task`.
    pub fn zeros(config: ModelConfig, task: TaskKind, specials: SpecialIds) -> Self {
        Self {
            backbone: Backbone::zeros(&config),
            head: head_for(task, config.encoder.hidden, None),
            config,
            task,
            specials,
        }
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction, HeadError> {
        Ok(self.run(ex, None, None)?.1)
    }

    /// Inference-mode loss (0 without labels) and prediction.
    pub fn run_inference(&self, ex: &Example) -> Result<(f64, Prediction), HeadError> {
        self.run(ex, None, None)
    }

    /// Inference-mode loss, for finite differences and evaluation.
    pub fn loss(&self, ex: &Example) -> Result<f64, HeadError> {
        Ok(self.run(ex, None, None)?.0)
    }

    /// Forward and backward of one labeled example; gradients of
    /// `scale · loss` accumulate into `grads`.
    pub fn accumulate_grad(
        &self,
        ex: &Example,
        scale: T,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut FinetuneModel<T>,
    ) -> Result<(f64, Prediction), HeadError> {
        self.run(ex, rng, Some((scale, grads)))
    }

    fn run(
        &self,
        ex: &Example,
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<(T, &mut FinetuneModel<T>)>,
    ) -> Result<(f64, Prediction), HeadError> {
        let sep = self.config.sep_id;
        let out = self.backbone.forward(ex, sep, rng)?;
        let last = out.last();
        let mut d_last = Matrix::zeros(last.rows, last.cols);
        let (loss, pred) = match (&self.head, self.task) {
            (Head::Classifier(head), task) => {
                let cls = last.head_rows(1);
                let (raw, pooled) = head.forward(&cls);
                let (loss, d_out, pred) = match (task, &ex.labels) {
                    (TaskKind::Regress, labels) => {
                        let y = raw.data[0];
                        let pred = Prediction::Score(y.as_f64());
                        match labels {
                            Labels::Score(target) => {
                                let diff = y - T::lit(*target as f64);
                                let d = Matrix::from_vec(1, 1, vec![diff + diff]);
                                ((diff * diff).as_f64(), Some(d), pred)
                            }
                            Labels::None => (0.0, None, pred),
                            other => return Err(HeadError::WrongLabels(format!("{other:?}"))),
                        }
                    }
                    (_, labels) => {
                        let classes = raw.cols;
                        let mut probs = raw.data.clone();
                        softmax_in_place(&mut probs);
                        let arg = (0..classes).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
                        let pred = Prediction::Class {
                            label: arg as u32,
                            probs: probs.iter().map(|p| p.as_f64()).collect(),
                        };
                        match labels {
                            Labels::Class(y) => {
                                let y = *y as usize;
                                if y >= classes {
                                    return Err(HeadError::LabelOutOfRange {
                                        label: y as u32,
                                        classes,
                                    });
                                }
                                let loss = log_sum_exp(&raw.data) - raw.data[y];
                                probs[y] -= T::one();
                                (loss.as_f64(), Some(Matrix::from_vec(1, classes, probs)), pred)
                            }
                            Labels::None => (0.0, None, pred),
                            other => return Err(HeadError::WrongLabels(format!("{other:?}"))),
                        }
                    }
                };
                if let (Some((scale, g)), Some(mut d_out)) = (grads, d_out) {
                    d_out.scale(scale);
                    let Head::Classifier(gh) = &mut g.head else {
                        return Err(HeadError::ShapeMismatch("gradient buffer has a different head".into()));
                    };
                    let d_cls = head.backward(&cls, &pooled, &d_out, gh);
                    d_last.row_mut(0).copy_from_slice(d_cls.row(0));
                    self.backbone.backward(ex, sep, &out, &d_last, &mut g.backbone);
                }
                (loss, pred)
            }
            (Head::Span(head), _) => {
                if ex.kind != ExampleKind::Span {
                    return Err(HeadError::WrongLabels(format!("{:?} example", ex.kind)));
                }
                let positions: Vec<usize> = span_candidates(ex, &self.specials);
                if positions.is_empty() {
                    return Err(HeadError::NoContextPositions);
                }
                let (sl, el) = head.logits(last, &positions);
                let (s, e) = best_span(&positions, &sl, &el, MAX_ANSWER_LEN).expect("non-empty candidates");
                let pred = Prediction::Span { start: s, end: e };
                let loss = match &ex.labels {
                    Labels::Span { start, end } => {
                        let (start, end) = (*start as usize, *end as usize);
                        let si = positions.binary_search(&start);
                        let ei = positions.binary_search(&end);
                        let (Ok(si), Ok(ei)) = (si, ei) else {
                            return Err(HeadError::AnswerNotInContext { start, end });
                        };
                        let half = T::lit(0.5);
                        let loss = half * (log_sum_exp(&sl) - sl[si] + log_sum_exp(&el) - el[ei]);
                        if let Some((scale, g)) = grads {
                            let Head::Span(gh) = &mut g.head else {
                                return Err(HeadError::ShapeMismatch("gradient buffer has a different head".into()));
                            };
                            for (logits, gold, w, dw, db) in [
                                (&sl, si, &head.start_weight, &mut gh.start_weight, &mut gh.start_bias),
                                (&el, ei, &head.end_weight, &mut gh.end_weight, &mut gh.end_bias),
                            ] {
                                let mut d = logits.clone();
                                softmax_in_place(&mut d);
                                d[gold] -= T::one();
                                for (k, &pos) in positions.iter().enumerate() {
                                    let dk = d[k] * half * scale;
                                    db.data[0] += dk;
                                    let h = last.row(pos);
                                    for c in 0..h.len() {
                                        dw.data[c] += dk * h[c];
                                    }
                                    let dl = d_last.row_mut(pos);
                                    for c in 0..dl.len() {
                                        dl[c] += dk * w.data[c];
                                    }
                                }
                            }
                            self.backbone.backward(ex, sep, &out, &d_last, &mut g.backbone);
                        }
                        return Ok((loss.as_f64(), pred));
                    }
                    Labels::None => 0.0,
                    other => return Err(HeadError::WrongLabels(format!("{other:?}"))),
                };
                (loss, pred)
            }
        };
        Ok((loss, pred))
    }
}

impl<T: Scalar> ParamSet<T> for FinetuneModel<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        let head = match &self.head {
            Head::Classifier(h) => prefixed("classifier", h.params()).collect::<Vec<_>>(),
            Head::Span(h) => prefixed("span", h.params()).collect(),
        };
        self.backbone.params().into_iter().chain(head).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let head = match &mut self.head {
            Head::Classifier(h) => prefixed("classifier", h.params_mut()).collect::<Vec<_>>(),
            Head::Span(h) => prefixed("span", h.params_mut()).collect(),
        };
        self.backbone.params_mut().into_iter().chain(head).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::SegmentCaps;
    use crate::example::Packer;
    use crate::synth;
    use crate::tokenizer::Vocab;
    use rand::{Rng, SeedableRng};

    fn vocab() -> Vocab {
        Vocab::parse(&synth::vocab_text()).unwrap()
    }

    fn random_hidden(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let head = ClassifierHead::<f64>::zeros(8, 4);
        let probs = classify(&Matrix::filled(3, 8, 0.7), &head).unwrap();
        assert_eq!(probs, vec![0.25; 4]);
    }

    #[test]
    fn distributions_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let head = ClassifierHead::<f64>::init(8, 3, &mut rng);
            let h = random_hidden(5, 8, &mut rng);
            let s: f64 = classify(&h, &head).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let reg = ClassifierHead::<f64>::init(8, 1, &mut rng);
        assert_eq!(classify(&random_hidden(2, 8, &mut rng), &reg).unwrap().len(), 1);
    }

    #[test]
    fn classify_rejects_wrong_width() {
        let head = ClassifierHead::<f32>::zeros(8, 2);
        assert!(matches!(classify(&Matrix::zeros(3, 6), &head), Err(HeadError::ShapeMismatch(_))));
        assert!(matches!(classify(&Matrix::zeros(0, 8), &head), Err(HeadError::ShapeMismatch(_))));
    }

    #[test]
    fn single_context_token_gets_all_mass() {
        let v = vocab();
        let packer = Packer::new(v.specials(), SegmentCaps::default(), 16);
        let span = packer
            .build_span(&v.tokenize("what was seen ?"), &[vec![v.tokenize("fox")]], Some((0, 0)))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = SpanHead::<f64>::init(8, &mut rng);
        let h = random_hidden(span.example.active_len(), 8, &mut rng);
        let d = extract_span(&h, &head, &span.example, &v.specials()).unwrap();
        assert_eq!(d.positions, vec![6]);
        assert_eq!(d.start, vec![1.0]);
        assert_eq!(d.end, vec![1.0]);
    }

    #[test]
    fn question_only_has_no_candidates() {
        let v = vocab();
        let packer = Packer::new(v.specials(), SegmentCaps::default(), 16);
        let mut ex = packer.build_single(&v.tokenize("what was seen ?")).unwrap();
        ex.kind = ExampleKind::Span;
        let h = Matrix::<f64>::zeros(ex.active_len(), 8);
        let err = extract_span(&h, &SpanHead::zeros(8), &ex, &v.specials());
        assert!(matches!(err, Err(HeadError::NoContextPositions)));
    }

    fn brute(start: &[f64], end: &[f64], max_len: usize) -> (usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for s in 0..start.len() {
            for e in s..end.len().min(s + max_len + 1) {
                if start[s] + end[e] > best.0 {
                    best = (start[s] + end[e], s, e);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn decoding_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let start: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let end: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let positions: Vec<usize> = (0..20).collect();
            let max_len = rng.random_range(0..25);
            assert_eq!(best_span(&positions, &start, &end, max_len), Some(brute(&start, &end, max_len)));
        }
        assert_eq!(best_span::<f64>(&[], &[], &[], 30), None);
    }

    #[test]
    fn param_names_carry_head_prefix() {
        let v = vocab();
        let cfg = ModelConfig::new(v.len(), v.specials().sep, crate::embeddings::PositionScheme::Sega, crate::encoder::EncoderConfig::toy());
        let m = FinetuneModel::<f32>::zeros(cfg, TaskKind::Span, v.specials());
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n == "span.start_weight"));
        let c = FinetuneModel::<f32>::zeros(cfg, TaskKind::Regress, v.specials());
        assert_eq!(c.params().last().unwrap().1.shape(), (1, 1));
    }
}

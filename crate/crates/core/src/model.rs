//! The embedding + encoder backbone and the masked-LM model built on it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbedCache, EmbedError, EmbeddingParams, PositionScheme, INIT_STD};
use crate::encoder::{EncoderConfig, EncoderError, EncoderOutput, EncoderParams};
use crate::example::{Example, Labels, IGNORE_LABEL, MAX_LEN};
use crate::mlm::loss::{cross_entropy_sum, LossError};
use crate::params::{prefixed, ParamSet};
use crate::scalar::Scalar;
use crate::segmenter::SegmentCaps;
use crate::tensor::{
    affine, affine_backward, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, matmul,
    truncated_normal, LayerNormCache, Matrix,
};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub scheme: PositionScheme,
    pub encoder: EncoderConfig,
    pub caps: SegmentCaps,
    pub max_positions: usize,
    /// Id of `[SEP]`, needed to derive A/B segment types.
    pub sep_id: TokenId,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, sep_id: TokenId, scheme: PositionScheme, encoder: EncoderConfig) -> Self {
        Self {
            vocab_size,
            scheme,
            encoder,
            caps: SegmentCaps::default(),
            max_positions: MAX_LEN,
            sep_id,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder.validate();
        if self.vocab_size == 0 {
            errs.push("vocab_size must be positive".into());
        }
        if self.max_positions == 0 || self.max_positions > MAX_LEN {
            errs.push(format!("max_positions must be in 1..={MAX_LEN}"));
        }
        if let Err(e) = self.caps.validate() {
            errs.push(e.to_string());
        }
        errs
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("example carries no MLM labels")]
    MissingMlmLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub embeddings: EmbeddingParams<T>,
    pub encoder: EncoderParams<T>,
}

/// Forward activations of the backbone for one example.
#[derive(Clone, Debug)]
pub struct BackboneOutput<T> {
    pub rows: usize,
    embed: EmbedCache<T>,
    pub encoded: EncoderOutput<T>,
}

impl<T> BackboneOutput<T> {
    pub fn last(&self) -> &Matrix<T> {
        self.encoded.last()
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut embeddings = EmbeddingParams::init(
            cfg.scheme,
            cfg.vocab_size,
            cfg.encoder.hidden,
            &cfg.caps,
            cfg.max_positions,
            rng,
        );
        embeddings.dropout = cfg.encoder.dropout;
        Self {
            embeddings,
            encoder: EncoderParams::init(cfg.encoder, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut embeddings = EmbeddingParams::zeros(
            cfg.scheme,
            cfg.vocab_size,
            cfg.encoder.hidden,
            &cfg.caps,
            cfg.max_positions,
        );
        embeddings.dropout = cfg.encoder.dropout;
        Self {
            embeddings,
            encoder: EncoderParams::zeros(cfg.encoder),
        }
    }

    pub fn scheme(&self) -> PositionScheme {
        self.embeddings.scheme
    }

    /// Runs the real (non-pad) prefix of `ex` through embeddings and
    /// encoder. Dropout is active when `rng` is given.
    pub fn forward(
        &self,
        ex: &Example,
        sep: TokenId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BackboneOutput<T>, ModelError> {
        let rows = ex.active_len();
        let (x, embed) = self.embeddings.forward(ex, rows, sep, rng.as_deref_mut())?;
        let encoded = self.encoder.forward(&x, &ex.attn_mask[..rows], rng)?;
        Ok(BackboneOutput { rows, embed, encoded })
    }

    pub fn backward(
        &self,
        ex: &Example,
        sep: TokenId,
        out: &BackboneOutput<T>,
        d_last: &Matrix<T>,
        grads: &mut Backbone<T>,
    ) {
        let dx = self
            .encoder
            .backward(&out.encoded, &ex.attn_mask[..out.rows], d_last, &mut grads.encoder);
        self.embeddings
            .backward(ex, sep, &out.embed, &dx, &mut grads.embeddings);
    }

    /// Inference-mode hidden states of all layers over the real prefix.
    pub fn hidden_states(&self, ex: &Example, sep: TokenId) -> Result<Vec<Matrix<T>>, ModelError> {
        Ok(self.forward(ex, sep, None)?.encoded.hidden)
    }
}

impl<T: Scalar> ParamSet<T> for Backbone<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        prefixed("embeddings", self.embeddings.params())
            .chain(prefixed("encoder", self.encoder.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        prefixed("embeddings", self.embeddings.params_mut())
            .chain(prefixed("encoder", self.encoder.params_mut()))
            .collect()
    }
}

/// Dense + GELU + layer norm transform followed by a decoder tied to the
/// token embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead<T> {
    pub transform_weight: Matrix<T>,
    pub transform_bias: Matrix<T>,
    pub ln_gain: Matrix<T>,
    pub ln_bias: Matrix<T>,
    pub out_bias: Matrix<T>,
}

struct MlmCache<T> {
    input: Matrix<T>,
    pre_act: Matrix<T>,
    ln: LayerNormCache<T>,
    normed: Matrix<T>,
}

impl<T: Scalar> MlmHead<T> {
    pub fn zeros(hidden: usize, vocab: usize) -> Self {
        Self {
            transform_weight: Matrix::zeros(hidden, hidden),
            transform_bias: Matrix::zeros(1, hidden),
            ln_gain: Matrix::filled(1, hidden, T::one()),
            ln_bias: Matrix::zeros(1, hidden),
            out_bias: Matrix::zeros(1, vocab),
        }
    }

    pub fn init(hidden: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut h = Self::zeros(hidden, vocab);
        h.transform_weight = truncated_normal(hidden, hidden, INIT_STD, rng);
        h
    }

    fn forward(&self, rows: &Matrix<T>, token_table: &Matrix<T>) -> (Matrix<T>, MlmCache<T>) {
        let pre_act = affine(rows, &self.transform_weight, &self.transform_bias);
        let mut act = pre_act.clone();
        act.data.iter_mut().for_each(|z| *z = gelu(*z));
        let (normed, ln) = layer_norm(&act, &self.ln_gain, &self.ln_bias);
        let mut logits = Matrix::zeros(rows.rows, token_table.rows);
        gemm(T::one(), &normed, false, token_table, true, T::zero(), &mut logits);
        logits.add_row_vector(&self.out_bias);
        (
            logits,
            MlmCache {
                input: rows.clone(),
                pre_act,
                ln,
                normed,
            },
        )
    }

    fn backward(
        &self,
        cache: &MlmCache<T>,
        token_table: &Matrix<T>,
        d_logits: &Matrix<T>,
        grads: &mut MlmHead<T>,
        d_token_table: &mut Matrix<T>,
    ) -> Matrix<T> {
        d_logits.col_sums_into(&mut grads.out_bias);
        gemm(T::one(), d_logits, true, &cache.normed, false, T::one(), d_token_table);
        let d_normed = matmul(d_logits, token_table);
        let mut d_act = layer_norm_backward(&d_normed, &cache.ln, &self.ln_gain, &mut grads.ln_gain, &mut grads.ln_bias);
        for (d, &z) in d_act.data.iter_mut().zip(&cache.pre_act.data) {
            *d *= gelu_grad(z);
        }
        affine_backward(
            &cache.input,
            &self.transform_weight,
            &d_act,
            &mut grads.transform_weight,
            &mut grads.transform_bias,
        )
    }
}

impl<T: Scalar> ParamSet<T> for MlmHead<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("transform_weight".into(), &self.transform_weight),
            ("transform_bias".into(), &self.transform_bias),
            ("ln_gain".into(), &self.ln_gain),
            ("ln_bias".into(), &self.ln_bias),
            ("out_bias".into(), &self.out_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        vec![
            ("transform_weight".into(), &mut self.transform_weight),
            ("transform_bias".into(), &mut self.transform_bias),
            ("ln_gain".into(), &mut self.ln_gain),
            ("ln_bias".into(), &mut self.ln_bias),
            ("out_bias".into(), &mut self.out_bias),
        ]
    }
}

/// Loss statistics of one example: summed cross-entropy, number of correct
/// argmax predictions and number of labeled positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MlmStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl MlmStats {
    pub fn merge(&mut self, o: &MlmStats) {
        self.loss_sum += o.loss_sum;
        self.correct += o.correct;
        self.count += o.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Backbone plus masked-LM head. There is no second objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub mlm: MlmHead<T>,
}

fn mlm_targets(ex: &Example, rows: usize) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let labels = match &ex.labels {
        Labels::Mlm(l) => l,
        _ => return Err(ModelError::MissingMlmLabels),
    };
    let mut pos = Vec::new();
    let mut tgt = Vec::new();
    for (i, &l) in labels.iter().enumerate().take(rows) {
        if l != IGNORE_LABEL {
            pos.push(i);
            tgt.push(l as usize);
        }
    }
    if pos.is_empty() {
        return Err(LossError::NoLabels.into());
    }
    Ok((pos, tgt))
}

impl<T: Scalar> PretrainModel<T> {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let backbone = Backbone::init(&config, rng);
        let mlm = MlmHead::init(config.encoder.hidden, config.vocab_size, rng);
        Self {
            config,
            backbone,
            mlm,
        }
    }

    pub fn zeros(config: ModelConfig) -> Self {
        Self {
            config,
            backbone: Backbone::zeros(&config),
            mlm: MlmHead::zeros(config.encoder.hidden, config.vocab_size),
        }
    }

    pub fn sep(&self) -> TokenId {
        self.config.sep_id
    }

    /// MLM logits (`count×|V|`) at the labeled positions of `ex`.
    pub fn mlm_logits(&self, ex: &Example) -> Result<(Vec<usize>, Matrix<T>), ModelError> {
        let out = self.backbone.forward(ex, self.sep(), None)?;
        let (pos, _) = mlm_targets(ex, out.rows)?;
        let rows = out.last().gather_rows(&pos);
        let (logits, _) = self.mlm.forward(&rows, &self.backbone.embeddings.token);
        Ok((pos, logits))
    }

    /// Inference-mode summed loss, for finite differences and evaluation.
    pub fn loss(&self, ex: &Example) -> Result<MlmStats, ModelError> {
        let out = self.backbone.forward(ex, self.sep(), None)?;
        let (pos, tgt) = mlm_targets(ex, out.rows)?;
        let rows = out.last().gather_rows(&pos);
        let (logits, _) = self.mlm.forward(&rows, &self.backbone.embeddings.token);
        let (sum, correct, _) = cross_entropy_sum(&logits, &tgt, T::zero());
        Ok(MlmStats {
            loss_sum: sum.as_f64(),
            correct,
            count: tgt.len(),
        })
    }

    /// Forward and backward for one masked example. Gradients of
    /// `scale · Σ cross-entropy` are accumulated into `grads`.
    pub fn accumulate_grad(
        &self,
        ex: &Example,
        scale: T,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut PretrainModel<T>,
    ) -> Result<MlmStats, ModelError> {
        let out = self.backbone.forward(ex, self.sep(), rng)?;
        let (pos, tgt) = mlm_targets(ex, out.rows)?;
        let rows = out.last().gather_rows(&pos);
        let (logits, cache) = self.mlm.forward(&rows, &self.backbone.embeddings.token);
        let (sum, correct, d_logits) = cross_entropy_sum(&logits, &tgt, scale);
        let d_rows = self.mlm.backward(
            &cache,
            &self.backbone.embeddings.token,
            &d_logits,
            &mut grads.mlm,
            &mut grads.backbone.embeddings.token,
        );
        let mut d_last = Matrix::zeros(out.rows, self.config.encoder.hidden);
        for (r, &p) in pos.iter().enumerate() {
            for (o, &v) in d_last.row_mut(p).iter_mut().zip(d_rows.row(r)) {
                *o += v;
            }
        }
        self.backbone
            .backward(ex, self.sep(), &out, &d_last, &mut grads.backbone);
        Ok(MlmStats {
            loss_sum: sum.as_f64(),
            correct,
            count: tgt.len(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> PretrainModel<U> {
        let mut out = PretrainModel::<U>::zeros(self.config);
        out.backbone.embeddings.layer_norm = self.backbone.embeddings.layer_norm;
        out.backbone.embeddings.dropout = self.backbone.embeddings.dropout;
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for PretrainModel<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        self.backbone
            .params()
            .into_iter()
            .chain(prefixed("mlm", self.mlm.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        self.backbone
            .params_mut()
            .into_iter()
            .chain(prefixed("mlm", self.mlm.params_mut()))
            .collect()
    }
}

//! Post-norm bidirectional transformer encoder with hand-written backward
//! passes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{prefixed, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{
    affine, affine_backward, apply_mask, dropout_mask, gelu, gelu_grad, gemm_view, layer_norm,
    layer_norm_backward, truncated_normal, LayerNormCache, Matrix, View, ViewMut,
};
use crate::embeddings::INIT_STD;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn base() -> Self {
        Self::with_ffn(12, 768, 12)
    }

    pub fn large() -> Self {
        Self::with_ffn(24, 1024, 24)
    }

    pub fn toy() -> Self {
        Self::with_ffn(2, 64, 4)
    }

    /// `ffn = 4·hidden`, dropout 0.1.
    pub fn with_ffn(layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn: 4 * hidden,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Self::base()),
            "large" => Some(Self::large()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("encoder.layers must be positive".to_string());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            errs.push(format!(
                "encoder.hidden ({}) must be a positive multiple of encoder.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 {
            errs.push("encoder.ffn must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("encoder.dropout {} must be in [0, 1)", self.dropout));
        }
        errs
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("query row {0} has no visible key")]
    AllMasked(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub q_weight: Matrix<T>,
    pub q_bias: Matrix<T>,
    pub k_weight: Matrix<T>,
    pub k_bias: Matrix<T>,
    pub v_weight: Matrix<T>,
    pub v_bias: Matrix<T>,
    pub o_weight: Matrix<T>,
    pub o_bias: Matrix<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ffn_in_weight: Matrix<T>,
    pub ffn_in_bias: Matrix<T>,
    pub ffn_out_weight: Matrix<T>,
    pub ffn_out_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn;
        Self {
            q_weight: Matrix::zeros(h, h),
            q_bias: Matrix::zeros(1, h),
            k_weight: Matrix::zeros(h, h),
            k_bias: Matrix::zeros(1, h),
            v_weight: Matrix::zeros(h, h),
            v_bias: Matrix::zeros(1, h),
            o_weight: Matrix::zeros(h, h),
            o_bias: Matrix::zeros(1, h),
            ln1_gain: Matrix::filled(1, h, T::one()),
            ln1_bias: Matrix::zeros(1, h),
            ffn_in_weight: Matrix::zeros(h, f),
            ffn_in_bias: Matrix::zeros(1, f),
            ffn_out_weight: Matrix::zeros(f, h),
            ffn_out_bias: Matrix::zeros(1, h),
            ln2_gain: Matrix::filled(1, h, T::one()),
            ln2_bias: Matrix::zeros(1, h),
        }
    }
}

impl<T: Scalar> ParamSet<T> for LayerParams<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("attn_q_weight".into(), &self.q_weight),
            ("attn_q_bias".into(), &self.q_bias),
            ("attn_k_weight".into(), &self.k_weight),
            ("attn_k_bias".into(), &self.k_bias),
            ("attn_v_weight".into(), &self.v_weight),
            ("attn_v_bias".into(), &self.v_bias),
            ("attn_o_weight".into(), &self.o_weight),
            ("attn_o_bias".into(), &self.o_bias),
            ("ln1_gain".into(), &self.ln1_gain),
            ("ln1_bias".into(), &self.ln1_bias),
            ("ffn_in_weight".into(), &self.ffn_in_weight),
            ("ffn_in_bias".into(), &self.ffn_in_bias),
            ("ffn_out_weight".into(), &self.ffn_out_weight),
            ("ffn_out_bias".into(), &self.ffn_out_bias),
            ("ln2_gain".into(), &self.ln2_gain),
            ("ln2_bias".into(), &self.ln2_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        vec![
            ("attn_q_weight".into(), &mut self.q_weight),
            ("attn_q_bias".into(), &mut self.q_bias),
            ("attn_k_weight".into(), &mut self.k_weight),
            ("attn_k_bias".into(), &mut self.k_bias),
            ("attn_v_weight".into(), &mut self.v_weight),
            ("attn_v_bias".into(), &mut self.v_bias),
            ("attn_o_weight".into(), &mut self.o_weight),
            ("attn_o_bias".into(), &mut self.o_bias),
            ("ln1_gain".into(), &mut self.ln1_gain),
            ("ln1_bias".into(), &mut self.ln1_bias),
            ("ffn_in_weight".into(), &mut self.ffn_in_weight),
            ("ffn_in_bias".into(), &mut self.ffn_in_bias),
            ("ffn_out_weight".into(), &mut self.ffn_out_weight),
            ("ffn_out_bias".into(), &mut self.ffn_out_bias),
            ("ln2_gain".into(), &mut self.ln2_gain),
            ("ln2_bias".into(), &mut self.ln2_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ParamSet<T> for EncoderParams<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params()).collect::<Vec<_>>())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params_mut()).collect::<Vec<_>>())
            .collect()
    }
}

/// Output of scaled dot-product attention over all heads.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    /// `n×H` context vectors.
    pub context: Matrix<T>,
    /// Per head `n×n` weights; row `i` is a distribution over visible keys.
    pub weights: Vec<Matrix<T>>,
    /// Values with masked rows zeroed.
    values: Matrix<T>,
}

/// Multi-head scaled dot-product attention. `q`, `k`, `v` are `n×H` with head
/// `h` occupying columns `h·d..(h+1)·d`. Masked keys get zero weight and their
/// values never enter the product.
pub fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mask: &[u8],
) -> Result<Attention<T>, EncoderError> {
    let n = q.rows;
    let hidden = q.cols;
    if k.shape() != (n, hidden) || v.shape() != (n, hidden) || mask.len() < n {
        return Err(EncoderError::ShapeMismatch(format!(
            "q {:?} k {:?} v {:?} mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            mask.len()
        )));
    }
    if heads == 0 || hidden % heads != 0 {
        return Err(EncoderError::ShapeMismatch(format!("{hidden} columns over {heads} heads")));
    }
    let visible: Vec<usize> = (0..n).filter(|&j| mask[j] != 0).collect();
    if visible.is_empty() {
        return Err(EncoderError::AllMasked(0));
    }
    let d = hidden / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut values = v.clone();
    for j in 0..n {
        if mask[j] == 0 {
            values.row_mut(j).fill(T::zero());
        }
    }
    let mut context = Matrix::zeros(n, hidden);
    let mut weights = Vec::with_capacity(heads);
    let mut buf = vec![T::zero(); visible.len()];
    for h in 0..heads {
        let mut s = Matrix::zeros(n, n);
        gemm_view(
            scale,
            View::columns(q, h * d, d),
            View::columns(k, h * d, d).t(),
            T::zero(),
            ViewMut::of(&mut s),
        );
        for i in 0..n {
            let row = s.row_mut(i);
            for (b, &j) in buf.iter_mut().zip(&visible) {
                *b = row[j];
            }
            crate::tensor::softmax_in_place(&mut buf);
            row.fill(T::zero());
            for (&b, &j) in buf.iter().zip(&visible) {
                row[j] = b;
            }
        }
        gemm_view(
            T::one(),
            View::of(&s),
            View::columns(&values, h * d, d),
            T::zero(),
            ViewMut::columns(&mut context, h * d, d),
        );
        weights.push(s);
    }
    Ok(Attention {
        context,
        weights,
        values,
    })
}

/// Backward of [`attention`]; returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    att: &Attention<T>,
    mask: &[u8],
    d_context: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let n = q.rows;
    let hidden = q.cols;
    let heads = att.weights.len();
    let d = hidden / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut dq = Matrix::zeros(n, hidden);
    let mut dk = Matrix::zeros(n, hidden);
    let mut dv = Matrix::zeros(n, hidden);
    for (h, p) in att.weights.iter().enumerate() {
        let mut dp = Matrix::zeros(n, n);
        gemm_view(
            T::one(),
            View::columns(d_context, h * d, d),
            View::columns(&att.values, h * d, d).t(),
            T::zero(),
            ViewMut::of(&mut dp),
        );
        gemm_view(
            T::one(),
            View::of(p).t(),
            View::columns(d_context, h * d, d),
            T::zero(),
            ViewMut::columns(&mut dv, h * d, d),
        );
        // softmax backward: dS = P ⊙ (dP − Σ_j P·dP)
        for i in 0..n {
            let pr = p.row(i);
            let dr = dp.row_mut(i);
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
        }
        gemm_view(
            scale,
            View::of(&dp),
            View::columns(k, h * d, d),
            T::zero(),
            ViewMut::columns(&mut dq, h * d, d),
        );
        gemm_view(
            scale,
            View::of(&dp).t(),
            View::columns(q, h * d, d),
            T::zero(),
            ViewMut::columns(&mut dk, h * d, d),
        );
    }
    for j in 0..n {
        if mask[j] == 0 {
            dv.row_mut(j).fill(T::zero());
        }
    }
    (dq, dk, dv)
}

#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    x: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    att: Attention<T>,
    drop1: Option<Vec<T>>,
    ln1: LayerNormCache<T>,
    h1: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
    drop2: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
}

fn maybe_dropout<T: Scalar>(m: &mut Matrix<T>, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Option<Vec<T>> {
    match rng {
        Some(r) if p > 0.0 => {
            let mask = dropout_mask(m.len(), p, &mut **r);
            apply_mask(m, &mask);
            Some(mask)
        }
        _ => None,
    }
}

impl<T: Scalar> LayerParams<T> {
    pub fn forward(
        &self,
        x: &Matrix<T>,
        mask: &[u8],
        heads: usize,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, LayerCache<T>), EncoderError> {
        let q = affine(x, &self.q_weight, &self.q_bias);
        let k = affine(x, &self.k_weight, &self.k_bias);
        let v = affine(x, &self.v_weight, &self.v_bias);
        let att = attention(&q, &k, &v, heads, mask)?;
        let mut attn_out = affine(&att.context, &self.o_weight, &self.o_bias);
        let drop1 = maybe_dropout(&mut attn_out, dropout, rng);
        attn_out.add_assign(x);
        let (h1, ln1) = layer_norm(&attn_out, &self.ln1_gain, &self.ln1_bias);
        let pre_act = affine(&h1, &self.ffn_in_weight, &self.ffn_in_bias);
        let mut act = pre_act.clone();
        act.data.iter_mut().for_each(|z| *z = gelu(*z));
        let mut ffn_out = affine(&act, &self.ffn_out_weight, &self.ffn_out_bias);
        let drop2 = maybe_dropout(&mut ffn_out, dropout, rng);
        ffn_out.add_assign(&h1);
        let (y, ln2) = layer_norm(&ffn_out, &self.ln2_gain, &self.ln2_bias);
        Ok((
            y,
            LayerCache {
                x: x.clone(),
                q,
                k,
                att,
                drop1,
                ln1,
                h1,
                pre_act,
                act,
                drop2,
                ln2,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        mask: &[u8],
        dy: &Matrix<T>,
        g: &mut LayerParams<T>,
    ) -> Matrix<T> {
        let d_res2 = layer_norm_backward(dy, &cache.ln2, &self.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        let mut d_ffn_out = d_res2.clone();
        if let Some(m) = &cache.drop2 {
            apply_mask(&mut d_ffn_out, m);
        }
        let mut d_act = affine_backward(
            &cache.act,
            &self.ffn_out_weight,
            &d_ffn_out,
            &mut g.ffn_out_weight,
            &mut g.ffn_out_bias,
        );
        for (d, &z) in d_act.data.iter_mut().zip(&cache.pre_act.data) {
            *d *= gelu_grad(z);
        }
        let mut d_h1 = affine_backward(
            &cache.h1,
            &self.ffn_in_weight,
            &d_act,
            &mut g.ffn_in_weight,
            &mut g.ffn_in_bias,
        );
        d_h1.add_assign(&d_res2);
        let d_res1 = layer_norm_backward(&d_h1, &cache.ln1, &self.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        let mut d_attn_out = d_res1.clone();
        if let Some(m) = &cache.drop1 {
            apply_mask(&mut d_attn_out, m);
        }
        let d_ctx = affine_backward(
            &cache.att.context,
            &self.o_weight,
            &d_attn_out,
            &mut g.o_weight,
            &mut g.o_bias,
        );
        let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.att, mask, &d_ctx);
        let mut dx = d_res1;
        dx.add_assign(&affine_backward(&cache.x, &self.q_weight, &dq, &mut g.q_weight, &mut g.q_bias));
        dx.add_assign(&affine_backward(&cache.x, &self.k_weight, &dk, &mut g.k_weight, &mut g.k_bias));
        dx.add_assign(&affine_backward(&cache.x, &self.v_weight, &dv, &mut g.v_weight, &mut g.v_bias));
        dx
    }
}

/// Hidden states of every layer; index 0 is the embedded input.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub hidden: Vec<Matrix<T>>,
    pub caches: Vec<LayerCache<T>>,
}

impl<T> EncoderOutput<T> {
    pub fn last(&self) -> &Matrix<T> {
        self.hidden.last().expect("at least the input")
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(config: EncoderConfig) -> Self {
        Self {
            config,
            layers: (0..config.layers).map(|_| LayerParams::zeros(&config)).collect(),
        }
    }

    /// Weights drawn from a truncated normal, biases zero, layer norms identity.
    pub fn init(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(config);
        for (name, m) in p.params_mut() {
            if name.ends_with("_weight") {
                *m = truncated_normal(m.rows, m.cols, INIT_STD, rng);
            }
        }
        p
    }

    pub fn forward(
        &self,
        embedded: &Matrix<T>,
        mask: &[u8],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput<T>, EncoderError> {
        if embedded.cols != self.config.hidden {
            return Err(EncoderError::ShapeMismatch(format!(
                "input width {} != hidden {}",
                embedded.cols, self.config.hidden
            )));
        }
        if mask.len() < embedded.rows {
            return Err(EncoderError::ShapeMismatch(format!(
                "mask covers {} of {} positions",
                mask.len(),
                embedded.rows
            )));
        }
        let mut hidden = vec![embedded.clone()];
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(
                hidden.last().unwrap(),
                mask,
                self.config.heads,
                self.config.dropout,
                &mut rng,
            )?;
            hidden.push(y);
            caches.push(cache);
        }
        Ok(EncoderOutput { hidden, caches })
    }

    /// Backpropagates a gradient on the last hidden state to the input.
    pub fn backward(
        &self,
        out: &EncoderOutput<T>,
        mask: &[u8],
        d_last: &Matrix<T>,
        grads: &mut EncoderParams<T>,
    ) -> Matrix<T> {
        let mut d = d_last.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&out.caches[i], mask, &d, &mut grads.layers[i]);
        }
        d
    }
}

//! Input representations: token embedding plus scheme-dependent positional
//! embeddings, followed by layer normalization and dropout.
//!
//! | scheme      | positional addends per token `j`                  |
//! |-------------|---------------------------------------------------|
//! | `Sega`      | token-index `T[t_j]`, sentence `S[s_j]`, paragraph `P[p_j]` |
//! | `Global`    | absolute position `G[j]`, A/B segment type         |
//! | `GlobalPs`  | `G[j]`, `S[s_j]`, `P[p_j]`                         |
//!
//! Addends are summed in the fixed order token, then the rows listed above
//! from left to right.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::example::{Example, MAX_LEN};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::segmenter::SegmentCaps;
use crate::tensor::{
    apply_mask, dropout_mask, layer_norm, layer_norm_backward, truncated_normal, LayerNormCache,
    Matrix,
};
use crate::tokenizer::TokenId;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionScheme {
    /// Paragraph, sentence and within-sentence token index tables.
    #[serde(rename = "sega")]
    Sega,
    /// One absolute-position table plus A/B segment types.
    #[serde(rename = "global")]
    Global,
    /// Absolute positions plus paragraph and sentence tables.
    #[serde(rename = "global_ps")]
    GlobalPs,
}

impl PositionScheme {
    pub const ALL: [PositionScheme; 3] = [
        PositionScheme::Sega,
        PositionScheme::Global,
        PositionScheme::GlobalPs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PositionScheme::Sega => "sega",
            PositionScheme::Global => "global",
            PositionScheme::GlobalPs => "global_ps",
        }
    }

    pub fn uses_segment_tables(self) -> bool {
        !matches!(self, PositionScheme::Global)
    }

    pub fn uses_global_table(self) -> bool {
        !matches!(self, PositionScheme::Sega)
    }
}

impl fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositionScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sega" => Ok(PositionScheme::Sega),
            "global" => Ok(PositionScheme::Global),
            "global_ps" => Ok(PositionScheme::GlobalPs),
            other => Err(format!("unknown scheme {other:?} (expected sega, global or global_ps)")),
        }
    }
}

/// Number of positional parameters a scheme adds at width `hidden` with the
/// default table sizes.
pub fn position_param_count(scheme: PositionScheme, hidden: usize) -> usize {
    position_rows(scheme, &SegmentCaps::default(), MAX_LEN) * hidden
}

/// Total positional table rows for a scheme. The global baseline's two A/B
/// segment rows are not positional and are not counted.
pub fn position_rows(scheme: PositionScheme, caps: &SegmentCaps, max_positions: usize) -> usize {
    let segment = caps.max_paragraphs + caps.max_sentences;
    match scheme {
        PositionScheme::Sega => segment + caps.max_tokens_per_sentence,
        PositionScheme::Global => max_positions,
        PositionScheme::GlobalPs => max_positions + segment,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("{table} index {index} at position {pos} exceeds table size {size}")]
    IndexOutOfTable {
        table: &'static str,
        index: usize,
        size: usize,
        pos: usize,
    },
    #[error("example has {found} positions, embedding expects at most {max}")]
    ShapeMismatch { found: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T> {
    pub scheme: PositionScheme,
    /// `|V|×H`
    pub token: Matrix<T>,
    pub paragraph: Option<Matrix<T>>,
    pub sentence: Option<Matrix<T>>,
    pub token_index: Option<Matrix<T>>,
    pub global: Option<Matrix<T>>,
    pub segment_type: Option<Matrix<T>>,
    pub ln_gain: Matrix<T>,
    pub ln_bias: Matrix<T>,
    pub layer_norm: bool,
    pub dropout: f64,
}

/// Saved state for the backward pass of one embedded sequence.
#[derive(Clone, Debug)]
pub struct EmbedCache<T> {
    rows: usize,
    ln: Option<LayerNormCache<T>>,
    dropout: Option<Vec<T>>,
}

impl<T: Scalar> EmbeddingParams<T> {
    /// All tables zero, layer-norm gain one.
    pub fn zeros(
        scheme: PositionScheme,
        vocab_size: usize,
        hidden: usize,
        caps: &SegmentCaps,
        max_positions: usize,
    ) -> Self {
        let seg = scheme.uses_segment_tables();
        let glob = scheme.uses_global_table();
        Self {
            scheme,
            token: Matrix::zeros(vocab_size, hidden),
            paragraph: seg.then(|| Matrix::zeros(caps.max_paragraphs, hidden)),
            sentence: seg.then(|| Matrix::zeros(caps.max_sentences, hidden)),
            token_index: (scheme == PositionScheme::Sega)
                .then(|| Matrix::zeros(caps.max_tokens_per_sentence, hidden)),
            global: glob.then(|| Matrix::zeros(max_positions, hidden)),
            segment_type: (scheme == PositionScheme::Global).then(|| Matrix::zeros(2, hidden)),
            ln_gain: Matrix::filled(1, hidden, T::one()),
            ln_bias: Matrix::zeros(1, hidden),
            layer_norm: true,
            dropout: 0.1,
        }
    }

    /// Truncated-normal initialization of every table.
    pub fn init(
        scheme: PositionScheme,
        vocab_size: usize,
        hidden: usize,
        caps: &SegmentCaps,
        max_positions: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(scheme, vocab_size, hidden, caps, max_positions);
        for (name, m) in p.params_mut() {
            if !name.starts_with("ln") {
                *m = truncated_normal(m.rows, m.cols, INIT_STD, rng);
            }
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.token.cols
    }

    pub fn vocab_size(&self) -> usize {
        self.token.rows
    }

    /// Positional parameters actually held by this instance.
    pub fn position_param_count(&self) -> usize {
        [&self.paragraph, &self.sentence, &self.token_index, &self.global]
            .iter()
            .filter_map(|m| m.as_ref().map(Matrix::len))
            .sum()
    }

    fn check_index(
        table: &Option<Matrix<T>>,
        name: &'static str,
        index: usize,
        pos: usize,
    ) -> Result<(), EmbedError> {
        if let Some(m) = table {
            if index >= m.rows {
                return Err(EmbedError::IndexOutOfTable {
                    table: name,
                    index,
                    size: m.rows,
                    pos,
                });
            }
        }
        Ok(())
    }

    /// Row indices used by position `j` of `ex`, validated against the tables.
    fn lookups(&self, ex: &Example, rows: usize, types: &[u8]) -> Result<Vec<[usize; 6]>, EmbedError> {
        let mut out = Vec::with_capacity(rows);
        for j in 0..rows {
            let id = ex.ids[j] as usize;
            if id >= self.token.rows {
                return Err(EmbedError::IndexOutOfTable {
                    table: "token",
                    index: id,
                    size: self.token.rows,
                    pos: j,
                });
            }
            let (p, s, t) = (ex.p[j] as usize, ex.s[j] as usize, ex.t[j] as usize);
            Self::check_index(&self.token_index, "token_index", t, j)?;
            Self::check_index(&self.sentence, "sentence", s, j)?;
            Self::check_index(&self.paragraph, "paragraph", p, j)?;
            Self::check_index(&self.global, "global", j, j)?;
            out.push([id, t, s, p, j, types[j] as usize]);
        }
        Ok(out)
    }

    /// Embeds all `max_len` positions of `ex` in inference mode.
    pub fn embed(&self, ex: &Example, sep: TokenId) -> Result<Matrix<T>, EmbedError> {
        Ok(self.forward(ex, ex.max_len(), sep, None)?.0)
    }

    /// Embeds positions `0..rows`. Dropout is applied when `rng` is given.
    pub fn forward(
        &self,
        ex: &Example,
        rows: usize,
        sep: TokenId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, EmbedCache<T>), EmbedError> {
        let n = ex.ids.len();
        if rows > n || [ex.p.len(), ex.s.len(), ex.t.len()].iter().any(|&l| l != n) {
            return Err(EmbedError::ShapeMismatch { found: rows, max: n });
        }
        let types = match self.segment_type {
            Some(_) => ex.segment_types(sep),
            None => vec![0; ex.max_len()],
        };
        let lookups = self.lookups(ex, rows, &types)?;
        let h = self.hidden();
        let mut x = Matrix::zeros(rows, h);
        for (j, &[id, t, s, p, g, ty]) in lookups.iter().enumerate() {
            let out = x.row_mut(j);
            out.copy_from_slice(self.token.row(id));
            let mut add = |table: &Option<Matrix<T>>, r: usize| {
                if let Some(m) = table {
                    for (o, &v) in out.iter_mut().zip(m.row(r)) {
                        *o += v;
                    }
                }
            };
            add(&self.token_index, t);
            add(&self.global, g);
            add(&self.segment_type, ty);
            add(&self.sentence, s);
            add(&self.paragraph, p);
        }
        let ln = if self.layer_norm {
            let (y, cache) = layer_norm(&x, &self.ln_gain, &self.ln_bias);
            x = y;
            Some(cache)
        } else {
            None
        };
        let dropout = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let mask = dropout_mask(x.len(), self.dropout, rng);
                apply_mask(&mut x, &mask);
                Some(mask)
            }
            _ => None,
        };
        Ok((x, EmbedCache { rows, ln, dropout }))
    }

    /// Accumulates table gradients for `dy` (the gradient of the embedded
    /// matrix) into `grads`.
    pub fn backward(
        &self,
        ex: &Example,
        sep: TokenId,
        cache: &EmbedCache<T>,
        dy: &Matrix<T>,
        grads: &mut EmbeddingParams<T>,
    ) {
        let mut d = dy.clone();
        if let Some(mask) = &cache.dropout {
            apply_mask(&mut d, mask);
        }
        if let Some(ln) = &cache.ln {
            d = layer_norm_backward(&d, ln, &self.ln_gain, &mut grads.ln_gain, &mut grads.ln_bias);
        }
        let types = match self.segment_type {
            Some(_) => ex.segment_types(sep),
            None => vec![0; ex.max_len()],
        };
        let lookups = self
            .lookups(ex, cache.rows, &types)
            .expect("indices validated in forward");
        for (j, &[id, t, s, p, g, ty]) in lookups.iter().enumerate() {
            let row = d.row(j);
            let scatter = |table: &mut Option<Matrix<T>>, r: usize| {
                if let Some(m) = table {
                    for (o, &v) in m.row_mut(r).iter_mut().zip(row) {
                        *o += v;
                    }
                }
            };
            for (o, &v) in grads.token.row_mut(id).iter_mut().zip(row) {
                *o += v;
            }
            scatter(&mut grads.token_index, t);
            scatter(&mut grads.global, g);
            scatter(&mut grads.segment_type, ty);
            scatter(&mut grads.sentence, s);
            scatter(&mut grads.paragraph, p);
        }
    }
}

impl<T: Scalar> ParamSet<T> for EmbeddingParams<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut v = vec![("token".to_string(), &self.token)];
        for (name, m) in [
            ("paragraph", &self.paragraph),
            ("sentence", &self.sentence),
            ("token_index", &self.token_index),
            ("global", &self.global),
            ("segment_type", &self.segment_type),
        ] {
            if let Some(m) = m {
                v.push((name.to_string(), m));
            }
        }
        v.push(("ln_gain".to_string(), &self.ln_gain));
        v.push(("ln_bias".to_string(), &self.ln_bias));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut v = vec![("token".to_string(), &mut self.token)];
        for (name, m) in [
            ("paragraph", &mut self.paragraph),
            ("sentence", &mut self.sentence),
            ("token_index", &mut self.token_index),
            ("global", &mut self.global),
            ("segment_type", &mut self.segment_type),
        ] {
            if let Some(m) = m {
                v.push((name.to_string(), m));
            }
        }
        v.push(("ln_gain".to_string(), &mut self.ln_gain));
        v.push(("ln_bias".to_string(), &mut self.ln_bias));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{ExampleKind, Labels};
    use rand::SeedableRng;

    fn example(ids: Vec<u32>, triples: Vec<(u16, u16, u16)>) -> Example {
        let n = ids.len();
        Example {
            ids,
            p: triples.iter().map(|t| t.0).collect(),
            s: triples.iter().map(|t| t.1).collect(),
            t: triples.iter().map(|t| t.2).collect(),
            attn_mask: vec![1; n],
            kind: ExampleKind::Pretrain,
            labels: Labels::None,
        }
    }

    #[test]
    fn counts_at_768() {
        assert_eq!(position_param_count(PositionScheme::Sega, 768), 311_808);
        assert_eq!(position_param_count(PositionScheme::Global, 768), 393_216);
        assert_eq!(position_param_count(PositionScheme::GlobalPs, 768), 508_416);
    }

    #[test]
    fn instance_count_matches_formula() {
        let caps = SegmentCaps::default();
        for s in PositionScheme::ALL {
            let p = EmbeddingParams::<f32>::zeros(s, 10, 8, &caps, MAX_LEN);
            assert_eq!(p.position_param_count(), position_param_count(s, 8));
        }
    }

    #[test]
    fn zero_tables_give_token_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let caps = SegmentCaps::default();
        let mut p = EmbeddingParams::<f64>::zeros(PositionScheme::Sega, 6, 4, &caps, MAX_LEN);
        p.token = truncated_normal(6, 4, 1.0, &mut rng);
        p.layer_norm = false;
        let ex = example(vec![2, 5, 3], vec![(0, 0, 0), (3, 7, 11), (3, 7, 12)]);
        let y = p.embed(&ex, 3).unwrap();
        for j in 0..3 {
            assert_eq!(y.row(j), p.token.row(ex.ids[j] as usize));
        }
    }

    #[test]
    fn equal_inputs_equal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let caps = SegmentCaps::default();
        let p = EmbeddingParams::<f64>::init(PositionScheme::Sega, 6, 4, &caps, MAX_LEN, &mut rng);
        let ex = example(vec![4, 4], vec![(1, 2, 3), (1, 2, 3)]);
        let y = p.embed(&ex, 3).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn out_of_table_index_is_an_error() {
        let caps = SegmentCaps::default();
        let p = EmbeddingParams::<f32>::zeros(PositionScheme::Sega, 6, 4, &caps, MAX_LEN);
        let ex = example(vec![1], vec![(50, 0, 0)]);
        assert!(matches!(
            p.embed(&ex, 3),
            Err(EmbedError::IndexOutOfTable { table: "paragraph", index: 50, .. })
        ));
        let ex = example(vec![9], vec![(0, 0, 0)]);
        assert!(matches!(p.embed(&ex, 3), Err(EmbedError::IndexOutOfTable { table: "token", .. })));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in PositionScheme::ALL {
            assert_eq!(s.name().parse::<PositionScheme>().unwrap(), s);
        }
        assert!("rotary".parse::<PositionScheme>().is_err());
    }
}

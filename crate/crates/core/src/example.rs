//! Fixed-capacity packed sequences and the builders that lay out pretraining,
//! classification and span-extraction inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::{IndexedToken, SegmentCaps};
use crate::tokenizer::{SpecialIds, SubToken, TokenId};

/// Longest packed sequence the model accepts.
pub const MAX_LEN: usize = 512;

/// Sentinel for positions without an MLM target.
pub const IGNORE_LABEL: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Pretrain,
    PairClassify,
    SingleClassify,
    Span,
}

impl ExampleKind {
    pub fn code(self) -> u8 {
        match self {
            ExampleKind::Pretrain => 0,
            ExampleKind::PairClassify => 1,
            ExampleKind::SingleClassify => 2,
            ExampleKind::Span => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ExampleKind::Pretrain,
            1 => ExampleKind::PairClassify,
            2 => ExampleKind::SingleClassify,
            3 => ExampleKind::Span,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    None,
    /// Original ids at selected positions, [`IGNORE_LABEL`] elsewhere.
    Mlm(Vec<i32>),
    Class(u32),
    /// Regression target.
    Score(f32),
    /// Inclusive start/end positions in the packed sequence.
    Span { start: u32, end: u32 },
}

impl PartialEq for Labels {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Labels::None, Labels::None) => true,
            (Labels::Mlm(a), Labels::Mlm(b)) => a == b,
            (Labels::Class(a), Labels::Class(b)) => a == b,
            (Labels::Score(a), Labels::Score(b)) => a.to_bits() == b.to_bits(),
            (Labels::Span { start: a, end: b }, Labels::Span { start: c, end: d }) => {
                a == c && b == d
            }
            _ => false,
        }
    }
}

/// One packed sequence. All arrays have length `max_len`; padding is a suffix
/// with `attn_mask == 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<TokenId>,
    pub p: Vec<u16>,
    pub s: Vec<u16>,
    pub t: Vec<u16>,
    pub attn_mask: Vec<u8>,
    pub kind: ExampleKind,
    pub labels: Labels,
}

impl Example {
    fn padded(max_len: usize, pad: TokenId, kind: ExampleKind) -> Self {
        Self {
            ids: vec![pad; max_len],
            p: vec![0; max_len],
            s: vec![0; max_len],
            t: vec![0; max_len],
            attn_mask: vec![0; max_len],
            kind,
            labels: Labels::None,
        }
    }

    fn set(&mut self, pos: usize, id: TokenId, (p, s, t): (u16, u16, u16)) {
        self.ids[pos] = id;
        self.p[pos] = p;
        self.s[pos] = s;
        self.t[pos] = t;
        self.attn_mask[pos] = 1;
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of real (non-pad) positions.
    pub fn active_len(&self) -> usize {
        self.attn_mask.iter().take_while(|&&m| m == 1).count()
    }

    pub fn triple(&self, pos: usize) -> (u16, u16, u16) {
        (self.p[pos], self.s[pos], self.t[pos])
    }

    /// Position of the first `[SEP]`.
    pub fn first_sep(&self, sep: TokenId) -> Option<usize> {
        (0..self.active_len()).find(|&i| self.ids[i] == sep)
    }

    /// A/B segment ids used by the global-position baseline: everything after
    /// the first `[SEP]` of a pair or span example is segment 1.
    pub fn segment_types(&self, sep: TokenId) -> Vec<u8> {
        let mut out = vec![0u8; self.max_len()];
        if matches!(self.kind, ExampleKind::PairClassify | ExampleKind::Span) {
            if let Some(first) = self.first_sep(sep) {
                for ty in out.iter_mut().take(self.active_len()).skip(first + 1) {
                    *ty = 1;
                }
            }
        }
        out
    }

    /// Checks the fine-tuning index conventions: a pair covers exactly
    /// paragraphs {0, 1} split at the first `[SEP]`; a span example keeps the
    /// question on paragraph 0 and its context on paragraphs >= 1; a single
    /// sequence stays on paragraph 0.
    pub fn layout_violation(&self, sep: TokenId) -> Option<String> {
        let active = self.active_len();
        let first = self.first_sep(sep)?;
        match self.kind {
            ExampleKind::Pretrain => None,
            ExampleKind::SingleClassify => (0..active)
                .find(|&i| self.p[i] != 0)
                .map(|i| format!("single-sequence token {i} on paragraph {}", self.p[i])),
            ExampleKind::PairClassify => {
                if let Some(i) = (0..=first).find(|&i| self.p[i] != 0) {
                    return Some(format!("first-sequence token {i} on paragraph {}", self.p[i]));
                }
                if let Some(i) = (first + 1..active).find(|&i| self.p[i] != 1) {
                    return Some(format!("second-sequence token {i} on paragraph {}", self.p[i]));
                }
                (first + 1 >= active).then(|| "pair has no second sequence".to_string())
            }
            ExampleKind::Span => {
                if let Some(i) = (0..=first).find(|&i| self.p[i] != 0) {
                    return Some(format!("question token {i} on paragraph {}", self.p[i]));
                }
                (first + 1..active)
                    .find(|&i| self.p[i] == 0)
                    .map(|i| format!("context token {i} on paragraph 0"))
            }
        }
    }

    /// Checks the packed-sequence invariants; returns every violation found.
    pub fn check(&self, specials: &SpecialIds, caps: &SegmentCaps) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.max_len();
        if [self.p.len(), self.s.len(), self.t.len(), self.attn_mask.len()]
            .iter()
            .any(|&l| l != n)
        {
            errs.push("array lengths differ".to_string());
            return errs;
        }
        if n > MAX_LEN {
            errs.push(format!("max_len {n} exceeds {MAX_LEN}"));
        }
        let active = self.active_len();
        if self.attn_mask[active..].iter().any(|&m| m != 0) {
            errs.push("padding is not a suffix".to_string());
        }
        if active == 0 || self.ids[0] != specials.cls {
            errs.push("position 0 is not [CLS]".to_string());
        }
        if active > 0 && self.ids[active - 1] != specials.sep {
            errs.push("last real position is not [SEP]".to_string());
        }
        let seps = self.ids[..active].iter().filter(|&&i| i == specials.sep).count();
        let want = match self.kind {
            ExampleKind::Pretrain | ExampleKind::SingleClassify => 1,
            ExampleKind::PairClassify | ExampleKind::Span => 2,
        };
        if seps != want {
            errs.push(format!("expected {want} [SEP], found {seps}"));
        }
        for i in 0..active {
            if self.p[i] as usize >= caps.max_paragraphs
                || self.s[i] as usize >= caps.max_sentences
                || self.t[i] as usize >= caps.max_tokens_per_sentence
            {
                errs.push(format!("index triple out of bounds at {i}"));
            }
        }
        if self.ids[active..].iter().any(|&i| i != specials.pad) {
            errs.push("non-pad id in padding".to_string());
        }
        errs
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no context tokens")]
    NoContext,
    #[error("answer ends at context token {end} but only {window} fit in the window")]
    AnswerOutOfWindow { end: usize, window: usize },
    #[error("max_len {0} leaves no room for content")]
    MaxLenTooSmall(usize),
}

/// A span example plus, for each packed position, the flat index of the
/// context token it holds.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanExample {
    pub example: Example,
    pub context_index: Vec<Option<usize>>,
    /// Number of context tokens that fit in the window.
    pub context_len: usize,
}

/// Lays token sequences out into [`Example`]s.
#[derive(Clone, Copy, Debug)]
pub struct Packer {
    pub specials: SpecialIds,
    pub caps: SegmentCaps,
    pub max_len: usize,
}

impl Packer {
    pub fn new(specials: SpecialIds, caps: SegmentCaps, max_len: usize) -> Self {
        Self {
            specials,
            caps,
            max_len,
        }
    }

    fn tok_index(&self, k: usize) -> u16 {
        k.min(self.caps.max_tokens_per_sentence - 1) as u16
    }

    fn para_index(&self, k: usize) -> u16 {
        k.min(self.caps.max_paragraphs - 1) as u16
    }

    fn sent_index(&self, k: usize) -> u16 {
        k.min(self.caps.max_sentences - 1) as u16
    }

    fn sep_after(&self, last: (u16, u16, u16)) -> (u16, u16, u16) {
        (last.0, last.1, self.tok_index(last.2 as usize + 1))
    }

    /// Greedily fills examples with up to `max_len - 2` content tokens of one
    /// document.
    pub fn pack_pretraining(&self, tokens: &[IndexedToken]) -> Vec<Example> {
        let cap = self.max_len.saturating_sub(2);
        if cap == 0 {
            return Vec::new();
        }
        tokens
            .chunks(cap)
            .map(|chunk| {
                let mut ex = Example::padded(self.max_len, self.specials.pad, ExampleKind::Pretrain);
                ex.set(0, self.specials.cls, (0, 0, 0));
                for (i, tok) in chunk.iter().enumerate() {
                    ex.set(i + 1, tok.id, tok.triple());
                }
                let last = chunk[chunk.len() - 1].triple();
                ex.set(chunk.len() + 1, self.specials.sep, self.sep_after(last));
                ex
            })
            .collect()
    }

    /// `[CLS] A [SEP] B [SEP]` with A on paragraph 0 and B on paragraph 1.
    pub fn build_pair(&self, a: &[SubToken], b: &[SubToken]) -> Result<Example, BuildError> {
        if a.is_empty() || b.is_empty() {
            return Err(BuildError::EmptySequence);
        }
        if self.max_len < 5 {
            return Err(BuildError::MaxLenTooSmall(self.max_len));
        }
        let (la, lb) = truncate_pair(a.len(), b.len(), self.max_len - 3);
        let mut ex = Example::padded(self.max_len, self.specials.pad, ExampleKind::PairClassify);
        ex.set(0, self.specials.cls, (0, 0, 0));
        let mut pos = 1;
        for (k, tok) in a[..la].iter().enumerate() {
            ex.set(pos, tok.id, (0, 0, self.tok_index(k)));
            pos += 1;
        }
        ex.set(pos, self.specials.sep, (0, 0, self.tok_index(la)));
        pos += 1;
        let pb = self.para_index(1);
        for (k, tok) in b[..lb].iter().enumerate() {
            ex.set(pos, tok.id, (pb, 0, self.tok_index(k)));
            pos += 1;
        }
        ex.set(pos, self.specials.sep, (pb, 0, self.tok_index(lb)));
        Ok(ex)
    }

    /// `[CLS] A [SEP]` with every token on paragraph 0, sentence 0.
    pub fn build_single(&self, a: &[SubToken]) -> Result<Example, BuildError> {
        if a.is_empty() {
            return Err(BuildError::EmptySequence);
        }
        if self.max_len < 3 {
            return Err(BuildError::MaxLenTooSmall(self.max_len));
        }
        let la = a.len().min(self.max_len - 2);
        let mut ex = Example::padded(self.max_len, self.specials.pad, ExampleKind::SingleClassify);
        ex.set(0, self.specials.cls, (0, 0, 0));
        for (k, tok) in a[..la].iter().enumerate() {
            ex.set(k + 1, tok.id, (0, 0, self.tok_index(k)));
        }
        ex.set(la + 1, self.specials.sep, (0, 0, self.tok_index(la)));
        Ok(ex)
    }

    /// `[CLS] question [SEP] context [SEP]`. The question sits on paragraph 0;
    /// context paragraph `i` gets paragraph index `i + 1`, with sentence and
    /// token indices restarting per paragraph and per sentence.
    ///
    /// `answer` holds inclusive flat context-token positions.
    pub fn build_span(
        &self,
        question: &[SubToken],
        context: &[Vec<Vec<SubToken>>],
        answer: Option<(usize, usize)>,
    ) -> Result<SpanExample, BuildError> {
        if question.is_empty() {
            return Err(BuildError::EmptyQuestion);
        }
        let total_ctx: usize = context.iter().flatten().map(Vec::len).sum();
        if total_ctx == 0 {
            return Err(BuildError::NoContext);
        }
        if self.max_len < 5 {
            return Err(BuildError::MaxLenTooSmall(self.max_len));
        }
        // Long questions keep at least one context slot.
        let lq = question.len().min(self.max_len - 4);
        let window = (self.max_len - 3 - lq).min(total_ctx);
        if let Some((_, end)) = answer {
            if end >= window {
                return Err(BuildError::AnswerOutOfWindow { end, window });
            }
        }
        let mut ex = Example::padded(self.max_len, self.specials.pad, ExampleKind::Span);
        let mut context_index = vec![None; self.max_len];
        ex.set(0, self.specials.cls, (0, 0, 0));
        let mut pos = 1;
        for (k, tok) in question[..lq].iter().enumerate() {
            ex.set(pos, tok.id, (0, 0, self.tok_index(k)));
            pos += 1;
        }
        ex.set(pos, self.specials.sep, (0, 0, self.tok_index(lq)));
        pos += 1;
        let mut flat = 0;
        let mut last = (0, 0, 0);
        'fill: for (i, para) in context.iter().filter(|p| p.iter().any(|s| !s.is_empty())).enumerate() {
            let pidx = self.para_index(i + 1);
            for (j, sent) in para.iter().filter(|s| !s.is_empty()).enumerate() {
                for (k, tok) in sent.iter().enumerate() {
                    if flat >= window {
                        break 'fill;
                    }
                    last = (pidx, self.sent_index(j), self.tok_index(k));
                    ex.set(pos, tok.id, last);
                    context_index[pos] = Some(flat);
                    pos += 1;
                    flat += 1;
                }
            }
        }
        ex.set(pos, self.specials.sep, self.sep_after(last));
        let offset = 2 + lq;
        if let Some((start, end)) = answer {
            ex.labels = Labels::Span {
                start: (offset + start) as u32,
                end: (offset + end) as u32,
            };
        }
        Ok(SpanExample {
            example: ex,
            context_index,
            context_len: window,
        })
    }
}

/// Trims the longer side's tail (ties trim `b`) until `la + lb <= budget`.
pub fn truncate_pair(mut la: usize, mut lb: usize, budget: usize) -> (usize, usize) {
    while la + lb > budget {
        if la > lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    (la, lb)
}

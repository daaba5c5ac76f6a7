//! Corpus text to packed pretraining examples.

use serde::{Deserialize, Serialize};

use crate::example::{Example, Packer};
use crate::segmenter::{assign_indices_counted, split_documents, ClampCounts, Document, SegmentCaps};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub documents: usize,
    pub paragraphs: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub examples: usize,
    pub unk_tokens: usize,
    pub clipped: ClampCounts,
    pub paragraph_clip_rate: f64,
    pub sentence_clip_rate: f64,
    pub token_clip_rate: f64,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Tokenizes, segments and packs every document of `corpus`.
pub fn build_pretraining(
    corpus: &str,
    vocab: &Vocab,
    caps: &SegmentCaps,
    max_len: usize,
) -> (Vec<Example>, SegmentStats) {
    let packer = Packer::new(vocab.specials(), *caps, max_len);
    let mut stats = SegmentStats::default();
    let mut out = Vec::new();
    for raw in split_documents(corpus) {
        let doc = Document::from_text(&raw, vocab);
        if doc.is_empty() {
            continue;
        }
        stats.documents += 1;
        stats.paragraphs += doc.paragraphs.len();
        stats.sentences += doc.paragraphs.iter().map(Vec::len).sum::<usize>();
        stats.unk_tokens += doc
            .paragraphs
            .iter()
            .flatten()
            .flatten()
            .filter(|t| t.id == vocab.specials().unk)
            .count();
        let (toks, clamp) = assign_indices_counted(&doc, caps);
        stats.tokens += toks.len();
        stats.clipped.merge(&clamp);
        out.extend(packer.pack_pretraining(&toks));
    }
    stats.examples = out.len();
    stats.paragraph_clip_rate = rate(stats.clipped.paragraph, stats.tokens);
    stats.sentence_clip_rate = rate(stats.clipped.sentence, stats.tokens);
    stats.token_clip_rate = rate(stats.clipped.token, stats.tokens);
    (out, stats)
}

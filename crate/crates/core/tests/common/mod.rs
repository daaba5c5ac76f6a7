#![allow(dead_code)]

use rand::Rng;
use segalm::example::{Example, ExampleKind, Labels};
use segalm::segmenter::{Document, IndexedToken, SegmentCaps};
use segalm::tokenizer::SubToken;

/// Sentence lengths per paragraph. Mostly small, with occasional paragraph,
/// sentence and token counts past the default caps (up to 60 × 120 × 300).
pub fn random_shape<R: Rng>(rng: &mut R) -> Vec<Vec<usize>> {
    let paragraphs = if rng.random_bool(0.05) {
        rng.random_range(45..=60)
    } else {
        rng.random_range(1..=6)
    };
    (0..paragraphs)
        .map(|_| {
            let sentences = if rng.random_bool(0.02) {
                rng.random_range(95..=120)
            } else {
                rng.random_range(1..=6)
            };
            (0..sentences)
                .map(|_| {
                    if rng.random_bool(0.01) {
                        rng.random_range(250..=300)
                    } else {
                        rng.random_range(1..=12)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn document(shape: &[Vec<usize>]) -> Document {
    let mut id = 5;
    Document::new(
        shape
            .iter()
            .map(|p| {
                p.iter()
                    .map(|&n| {
                        (0..n)
                            .map(|_| {
                                id += 1;
                                SubToken {
                                    id,
                                    surface: String::new(),
                                    is_continuation: false,
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Every violation of the bounds, clamp, monotonicity, reset and count
/// properties for the tokens assigned to a document of `shape`.
pub fn index_violations(shape: &[Vec<usize>], toks: &[IndexedToken], caps: &SegmentCaps) -> Vec<String> {
    let mut errs = Vec::new();
    let total: usize = shape.iter().flatten().sum();
    if toks.len() != total {
        errs.push(format!("{} tokens emitted for {total} subtokens", toks.len()));
        return errs;
    }
    let cap = |v: usize, c: usize| v.min(c - 1) as u16;
    let mut k = 0;
    let mut prev: Option<((u16, u16, u16), usize, usize)> = None;
    for (i, para) in shape.iter().enumerate() {
        for (j, &len) in para.iter().enumerate() {
            for t in 0..len {
                let tok = &toks[k];
                let got = tok.triple();
                if tok.p as usize >= caps.max_paragraphs
                    || tok.s as usize >= caps.max_sentences
                    || tok.t as usize >= caps.max_tokens_per_sentence
                {
                    errs.push(format!("token {k}: {got:?} out of bounds"));
                }
                let want = (
                    cap(i, caps.max_paragraphs),
                    cap(j, caps.max_sentences),
                    cap(t, caps.max_tokens_per_sentence),
                );
                if got != want {
                    errs.push(format!("token {k}: {got:?}, expected {want:?}"));
                }
                if let Some((before, pi, pj)) = prev {
                    let new_para = pi != i;
                    let new_sent = new_para || pj != j;
                    // A clamped paragraph or sentence repeats the last index, so
                    // the lower indices restart without it increasing.
                    let clamped = (new_para && before.0 == got.0)
                        || (new_sent && !new_para && before.1 == got.1);
                    if got < before && !clamped {
                        errs.push(format!("token {k}: {got:?} after {before:?}"));
                    }
                    let t_cap_one = caps.max_tokens_per_sentence == 1;
                    if new_sent != (got.2 == 0) && !(t_cap_one && got.2 == 0) {
                        errs.push(format!("token {k}: t = {} at sentence start {new_sent}", got.2));
                    }
                    if new_para && got.1 != 0 {
                        errs.push(format!("token {k}: s = {} at paragraph start", got.1));
                    }
                    if new_sent && !new_para && got.1 == 0 && caps.max_sentences > 1 {
                        errs.push(format!("token {k}: s reset inside a paragraph"));
                    }
                    if !new_sent {
                        let top = (caps.max_tokens_per_sentence - 1) as u16;
                        let stepped = got.2 == before.2 + 1 || (before.2 == top && got.2 == top);
                        if !stepped || got.0 != before.0 || got.1 != before.1 {
                            errs.push(format!("token {k}: {got:?} does not follow {before:?}"));
                        }
                    }
                } else if got != (0, 0, 0) {
                    errs.push(format!("first token at {got:?}"));
                }
                prev = Some((got, i, j));
                k += 1;
            }
        }
    }
    errs
}

/// Arbitrary field values of the right lengths; not necessarily a valid
/// layout.
pub fn fuzz_example<R: Rng>(rng: &mut R, max_len: usize) -> Example {
    let kinds = [
        ExampleKind::Pretrain,
        ExampleKind::PairClassify,
        ExampleKind::SingleClassify,
        ExampleKind::Span,
    ];
    let labels = match rng.random_range(0..5) {
        0 => Labels::None,
        1 => Labels::Mlm((0..max_len).map(|_| rng.random_range(-1..50_000)).collect()),
        2 => Labels::Class(rng.random()),
        3 => Labels::Score(f32::from_bits(rng.random())),
        _ => Labels::Span {
            start: rng.random(),
            end: rng.random(),
        },
    };
    Example {
        ids: (0..max_len).map(|_| rng.random()).collect(),
        p: (0..max_len).map(|_| rng.random()).collect(),
        s: (0..max_len).map(|_| rng.random()).collect(),
        t: (0..max_len).map(|_| rng.random()).collect(),
        attn_mask: (0..max_len).map(|_| rng.random_range(0..2)).collect(),
        kind: kinds[rng.random_range(0..kinds.len())],
        labels,
    }
}

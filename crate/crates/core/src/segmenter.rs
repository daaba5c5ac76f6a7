//! Paragraph and sentence segmentation and (paragraph, sentence, token)
//! index assignment.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{SubToken, TokenId, Vocab};

/// Line that separates documents inside one corpus file.
pub const DOC_SEPARATOR: &str = "===DOC===";

static ABBREVIATIONS_TXT: &str = include_str!("../data/abbreviations.txt");

fn abbreviations() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        ABBREVIATIONS_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

/// Embedding-table sizes for the three index axes. Valid indices are
/// `0..cap`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentCaps {
    pub max_paragraphs: usize,
    pub max_sentences: usize,
    pub max_tokens_per_sentence: usize,
}

impl Default for SegmentCaps {
    fn default() -> Self {
        Self {
            max_paragraphs: 50,
            max_sentences: 100,
            max_tokens_per_sentence: 256,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("segment cap {0} must be positive and below 65536")]
pub struct InvalidCaps(pub &'static str);

impl SegmentCaps {
    pub fn validate(&self) -> Result<(), InvalidCaps> {
        let ok = |v: usize| v > 0 && v <= u16::MAX as usize + 1;
        if !ok(self.max_paragraphs) {
            return Err(InvalidCaps("max_paragraphs"));
        }
        if !ok(self.max_sentences) {
            return Err(InvalidCaps("max_sentences"));
        }
        if !ok(self.max_tokens_per_sentence) {
            return Err(InvalidCaps("max_tokens_per_sentence"));
        }
        Ok(())
    }
}

/// A subtoken id with its position triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IndexedToken {
    pub id: TokenId,
    pub p: u16,
    pub s: u16,
    pub t: u16,
}

impl IndexedToken {
    pub fn triple(&self) -> (u16, u16, u16) {
        (self.p, self.s, self.t)
    }
}

/// Paragraphs of sentences of subtokens. Built documents never contain an
/// empty paragraph or sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Document {
    pub paragraphs: Vec<Vec<Vec<SubToken>>>,
}

impl Document {
    /// Drops empty sentences, then empty paragraphs.
    pub fn new(paragraphs: Vec<Vec<Vec<SubToken>>>) -> Self {
        let paragraphs = paragraphs
            .into_iter()
            .map(|p| p.into_iter().filter(|s| !s.is_empty()).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        Self { paragraphs }
    }

    pub fn from_text(raw: &str, vocab: &Vocab) -> Self {
        let paragraphs = split_paragraphs(raw)
            .iter()
            .map(|p| {
                split_sentences(p)
                    .iter()
                    .map(|s| vocab.tokenize(s))
                    .collect()
            })
            .collect();
        Self::new(paragraphs)
    }

    pub fn token_count(&self) -> usize {
        self.paragraphs.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }
}

/// Counts of tokens whose index hit a cap and was clamped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampCounts {
    pub tokens: usize,
    pub paragraph: usize,
    pub sentence: usize,
    pub token: usize,
}

impl ClampCounts {
    pub fn merge(&mut self, other: &ClampCounts) {
        self.tokens += other.tokens;
        self.paragraph += other.paragraph;
        self.sentence += other.sentence;
        self.token += other.token;
    }
}

/// Splits a corpus file into documents on `===DOC===` lines.
pub fn split_documents(corpus: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur = String::new();
    for line in corpus.lines() {
        if line.trim() == DOC_SEPARATOR {
            if !cur.trim().is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
            cur.clear();
        } else {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    if !cur.trim().is_empty() {
        docs.push(cur);
    }
    docs
}

/// Paragraphs are maximal runs of lines separated by blank lines.
pub fn split_paragraphs(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out.into_iter()
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn starts_sentence(chars: &[char], k: usize) -> bool {
    match chars.get(k) {
        Some(c) if c.is_uppercase() || c.is_ascii_digit() => true,
        Some('"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}') => chars
            .get(k + 1)
            .is_some_and(|c| c.is_uppercase() || c.is_ascii_digit()),
        _ => false,
    }
}

/// Word immediately before position `dot` (exclusive), lowercased.
fn word_before(chars: &[char], dot: usize) -> String {
    let mut b = dot;
    while b > 0 && chars[b - 1].is_alphanumeric() {
        b -= 1;
    }
    chars[b..dot].iter().collect::<String>().to_lowercase()
}

/// Rule-based sentence split: `.`, `!` or `?` (plus trailing closers) followed
/// by whitespace and an uppercase letter or digit ends a sentence, unless the
/// period closes a listed abbreviation.
pub fn split_sentences(paragraph: &str) -> Vec<String> {
    let chars: Vec<char> = paragraph.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if !matches!(c, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (matches!(chars[j], '.' | '!' | '?') || is_closer(chars[j])) {
            j += 1;
        }
        if j >= chars.len() || !chars[j].is_whitespace() {
            i = j;
            continue;
        }
        let mut k = j;
        while k < chars.len() && chars[k].is_whitespace() {
            k += 1;
        }
        if !starts_sentence(&chars, k) {
            i = j;
            continue;
        }
        if c == '.' && abbreviations().contains(word_before(&chars, i).as_str()) {
            i = j;
            continue;
        }
        let s: String = chars[start..j].iter().collect();
        let s = s.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        start = k;
        i = k;
    }
    let tail: String = chars[start.min(chars.len())..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn clamp(v: usize, cap: usize, hits: &mut usize) -> u16 {
    if v >= cap {
        *hits += 1;
        (cap - 1) as u16
    } else {
        v as u16
    }
}

pub fn assign_indices(doc: &Document, caps: &SegmentCaps) -> Vec<IndexedToken> {
    assign_indices_counted(doc, caps).0
}

/// Same as [`assign_indices`] and also reports how many tokens were clamped
/// on each axis.
pub fn assign_indices_counted(doc: &Document, caps: &SegmentCaps) -> (Vec<IndexedToken>, ClampCounts) {
    let mut counts = ClampCounts::default();
    let mut out = Vec::with_capacity(doc.token_count());
    for (i, para) in doc.paragraphs.iter().enumerate() {
        for (j, sent) in para.iter().enumerate() {
            for (k, tok) in sent.iter().enumerate() {
                out.push(IndexedToken {
                    id: tok.id,
                    p: clamp(i, caps.max_paragraphs, &mut counts.paragraph),
                    s: clamp(j, caps.max_sentences, &mut counts.sentence),
                    t: clamp(k, caps.max_tokens_per_sentence, &mut counts.token),
                });
            }
        }
    }
    counts.tokens = out.len();
    (out, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(id: TokenId) -> SubToken {
        SubToken {
            id,
            surface: format!("w{id}"),
            is_continuation: false,
        }
    }

    #[test]
    fn paragraph_split() {
        assert_eq!(split_paragraphs("A.\n\nB."), ["A.", "B."]);
        assert_eq!(split_paragraphs("A.\nB."), ["A.\nB."]);
        assert!(split_paragraphs("\n\n\n").is_empty());
        assert_eq!(split_paragraphs("A.\n  \n\n\nB.\n"), ["A.", "B."]);
    }

    #[test]
    fn sentence_split() {
        assert_eq!(split_sentences("I ran. He slept."), ["I ran.", "He slept."]);
        assert_eq!(split_sentences("Dr. Smith ran."), ["Dr. Smith ran."]);
        assert_eq!(
            split_sentences("no terminal punctuation"),
            ["no terminal punctuation"]
        );
        assert_eq!(split_sentences("Wait! Why? 3 days."), ["Wait!", "Why?", "3 days."]);
        assert_eq!(split_sentences("He said \"Go.\" Then left."), ["He said \"Go.\"", "Then left."]);
        // lowercase continuation does not split
        assert_eq!(split_sentences("e.g. this one. ok"), ["e.g. this one. ok"]);
    }

    #[test]
    fn abbreviation_list_has_26_entries() {
        assert_eq!(abbreviations().len(), 26);
        assert!(abbreviations().contains("dr"));
    }

    #[test]
    fn concatenation_preserves_text() {
        let p = "One two. Three four!  Five? six seven. Eight";
        let joined: String = split_sentences(p).join(" ");
        let squash = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(squash(&joined), squash(p));
    }

    #[test]
    fn indices_single_sentence() {
        let doc = Document::new(vec![vec![vec![tok(7), tok(8), tok(9)]]]);
        let t: Vec<_> = assign_indices(&doc, &SegmentCaps::default())
            .iter()
            .map(IndexedToken::triple)
            .collect();
        assert_eq!(t, [(0, 0, 0), (0, 0, 1), (0, 0, 2)]);
    }

    #[test]
    fn sentence_index_resets_per_paragraph() {
        let doc = Document::new(vec![vec![vec![tok(5)]], vec![vec![tok(6)]]]);
        let t: Vec<_> = assign_indices(&doc, &SegmentCaps::default())
            .iter()
            .map(IndexedToken::triple)
            .collect();
        assert_eq!(t, [(0, 0, 0), (1, 0, 0)]);
    }

    #[test]
    fn long_sentence_clamps_token_index() {
        let sent: Vec<_> = (0..300).map(|i| tok(5 + i)).collect();
        let doc = Document::new(vec![vec![sent]]);
        let (idx, counts) = assign_indices_counted(&doc, &SegmentCaps::default());
        assert_eq!(idx[299].t, 255);
        assert_eq!(idx[255].t, 255);
        assert_eq!(idx[254].t, 254);
        assert_eq!(idx.iter().map(|x| x.t).max(), Some(255));
        assert_eq!(counts.token, 300 - 256);
    }

    #[test]
    fn empty_parts_are_dropped() {
        let doc = Document::new(vec![vec![vec![], vec![tok(5)]], vec![vec![]]]);
        assert_eq!(doc.paragraphs.len(), 1);
        assert_eq!(doc.paragraphs[0].len(), 1);
    }

    #[test]
    fn documents_split_on_marker() {
        let docs = split_documents("a\n===DOC===\nb\n\nc\n===DOC===\n\n");
        assert_eq!(docs, ["a\n", "b\n\nc\n"]);
    }
}

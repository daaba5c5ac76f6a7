//! Task JSON-lines files and their conversion into fine-tuning examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::example::{BuildError, Example, Labels, Packer};
use crate::heads::TaskKind;
use crate::tokenizer::{SubToken, Vocab};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Build { line: usize, source: BuildError },
    #[error("line {line}: {message}")]
    Label { line: usize, message: String },
    #[error("task file has no records")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    /// Integer class or real-valued score.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub question: String,
    pub context_paragraphs: Vec<Vec<String>>,
    pub answer_text: String,
    /// Character offset into the context joined with `" "` between
    /// sentences and `"\n\n"` between paragraphs.
    pub answer_char_start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Classification(Vec<ClassRecord>),
    Span(Vec<SpanRecord>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Classification(r) => r.len(),
            TaskData::Span(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Span for span records; otherwise classification over `max + 1`
    /// labels when every label is a non-negative integer, else regression.
    pub fn infer_kind(&self) -> TaskKind {
        match self {
            TaskData::Span(_) => TaskKind::Span,
            TaskData::Classification(rs) => {
                let integral = rs.iter().all(|r| r.label >= 0.0 && r.label.fract() == 0.0);
                if integral {
                    let max = rs.iter().map(|r| r.label as usize).max().unwrap_or(0);
                    TaskKind::Classify {
                        num_labels: (max + 1).max(2),
                    }
                } else {
                    TaskKind::Regress
                }
            }
        }
    }
}

/// Parses a task file. The first record decides between classification and
/// span lines; blank lines are skipped.
pub fn parse_task(text: &str) -> Result<TaskData, TaskError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let Some(&(first_line, first)) = lines.first() else {
        return Err(TaskError::Empty);
    };
    let probe: serde_json::Value = serde_json::from_str(first).map_err(|e| TaskError::Parse {
        line: first_line,
        message: e.to_string(),
    })?;
    let is_span = probe.get("question").is_some();
    fn parse<R: for<'de> Deserialize<'de>>(lines: &[(usize, &str)]) -> Result<Vec<R>, TaskError> {
        lines
            .iter()
            .map(|&(line, l)| {
                serde_json::from_str(l).map_err(|e| TaskError::Parse {
                    line,
                    message: e.to_string(),
                })
            })
            .collect()
    }
    if is_span {
        Ok(TaskData::Span(parse(&lines)?))
    } else {
        Ok(TaskData::Classification(parse(&lines)?))
    }
}

pub fn load_task(path: impl AsRef<Path>) -> Result<TaskData, TaskError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_task(&text)
}

/// Pair records become `[CLS] A [SEP] B [SEP]`, single records
/// `[CLS] A [SEP]`.
pub fn build_classification(
    records: &[ClassRecord],
    vocab: &Vocab,
    packer: &Packer,
    kind: TaskKind,
) -> Result<Vec<Example>, TaskError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 1;
            let a = vocab.tokenize(&r.text_a);
            let mut ex = match &r.text_b {
                Some(b) => packer.build_pair(&a, &vocab.tokenize(b)),
                None => packer.build_single(&a),
            }
            .map_err(|source| TaskError::Build { line, source })?;
            ex.labels = match kind {
                TaskKind::Classify { num_labels } => {
                    if r.label < 0.0 || r.label.fract() != 0.0 || r.label as usize >= num_labels {
                        return Err(TaskError::Label {
                            line,
                            message: format!("label {} is not a class below {num_labels}", r.label),
                        });
                    }
                    Labels::Class(r.label as u32)
                }
                TaskKind::Regress => Labels::Score(r.label as f32),
                TaskKind::Span => {
                    return Err(TaskError::Label {
                        line,
                        message: "classification record for a span task".into(),
                    })
                }
            };
            Ok(ex)
        })
        .collect()
}

/// A packed span example together with what is needed to turn predicted
/// positions back into answer text.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanInstance {
    pub example: Example,
    pub context: String,
    /// Character range in `context` of each flat context token.
    pub token_chars: Vec<(usize, usize)>,
    /// Flat context token at each packed position.
    pub context_index: Vec<Option<usize>>,
    pub answer_text: String,
}

impl SpanInstance {
    /// Context text covered by packed positions `start..=end`.
    pub fn answer_between(&self, start: usize, end: usize) -> String {
        let (Some(Some(s)), Some(Some(e))) = (self.context_index.get(start), self.context_index.get(end)) else {
            return String::new();
        };
        let from = self.token_chars[*s].0;
        let to = self.token_chars[*e].1;
        self.context.chars().skip(from).take(to.saturating_sub(from)).collect()
    }
}

pub fn joined_context(paragraphs: &[Vec<String>]) -> String {
    paragraphs
        .iter()
        .map(|p| p.join(" "))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Tokenized context paragraphs plus the character range of every token in
/// the joined context.
fn tokenize_context(paragraphs: &[Vec<String>], vocab: &Vocab) -> (Vec<Vec<Vec<SubToken>>>, Vec<(usize, usize)>) {
    let mut chars = Vec::new();
    let mut tokens = Vec::new();
    let mut base = 0;
    for (pi, para) in paragraphs.iter().enumerate() {
        if pi > 0 {
            base += 2;
        }
        let mut sents = Vec::new();
        for (si, sent) in para.iter().enumerate() {
            if si > 0 {
                base += 1;
            }
            let toks = vocab.tokenize_with_offsets(sent);
            chars.extend(toks.iter().map(|(_, s, e)| (base + s, base + e)));
            sents.push(toks.into_iter().map(|(t, _, _)| t).collect());
            base += sent.chars().count();
        }
        tokens.push(sents);
    }
    (tokens, chars)
}

/// Packs span records. Records whose answer does not map onto context
/// tokens or falls past the window are dropped; the count of dropped
/// records is returned alongside.
pub fn build_spans(
    records: &[SpanRecord],
    vocab: &Vocab,
    packer: &Packer,
) -> Result<(Vec<SpanInstance>, usize), TaskError> {
    let mut out = Vec::new();
    let mut dropped = 0;
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        let question = vocab.tokenize(&r.question);
        let (context, token_chars) = tokenize_context(&r.context_paragraphs, vocab);
        let a_start = r.answer_char_start;
        let a_end = a_start + r.answer_text.chars().count();
        let first = token_chars.iter().position(|&(_, e)| e > a_start);
        let last = token_chars.iter().rposition(|&(s, _)| s < a_end);
        let answer = match (first, last) {
            (Some(s), Some(e)) if s <= e && !r.answer_text.is_empty() => Some((s, e)),
            _ => {
                dropped += 1;
                continue;
            }
        };
        match packer.build_span(&question, &context, answer) {
            Ok(span) => out.push(SpanInstance {
                example: span.example,
                context: joined_context(&r.context_paragraphs),
                token_chars,
                context_index: span.context_index,
                answer_text: r.answer_text.clone(),
            }),
            Err(BuildError::AnswerOutOfWindow { .. }) => dropped += 1,
            Err(source) => return Err(TaskError::Build { line, source }),
        }
    }
    Ok((out, dropped))
}

//! WordPiece vocabulary and greedy longest-match-first subword tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

const CONTINUATION: &str = "##";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("reading vocab {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab is missing special token {0}")]
    MissingSpecialToken(String),
    #[error("duplicate vocab token at line {0}")]
    DuplicateToken(usize),
    #[error("empty vocab token at line {0}")]
    EmptyLine(usize),
    #[error("vocab is empty")]
    EmptyVocab,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("surface {0:?} is not in this vocab")]
    UnknownSurface(String),
}

/// Ids of the five reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl SpecialIds {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

/// An immutable subword vocabulary. Ids are zero-based line numbers of the
/// vocab file.
#[derive(Clone, Debug)]
pub struct Vocab {
    entries: Vec<String>,
    id_of: HashMap<String, TokenId>,
    specials: SpecialIds,
    lowercase: bool,
    hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubToken {
    pub id: TokenId,
    pub surface: String,
    pub is_continuation: bool,
}

/// A pre-tokenized word with its character range in the original text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Vocab {
    pub fn from_entries(entries: Vec<String>) -> Result<Self, VocabError> {
        if entries.is_empty() {
            return Err(VocabError::EmptyVocab);
        }
        let mut id_of = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.is_empty() {
                return Err(VocabError::EmptyLine(i + 1));
            }
            if id_of.insert(e.clone(), i as TokenId).is_some() {
                return Err(VocabError::DuplicateToken(i + 1));
            }
        }
        let find = |name: &str| {
            id_of
                .get(name)
                .copied()
                .ok_or_else(|| VocabError::MissingSpecialToken(name.to_string()))
        };
        let specials = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        let mut hasher = Sha256::new();
        for e in &entries {
            hasher.update(e.as_bytes());
            hasher.update(b"\n");
        }
        let hash = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(Self {
            entries,
            id_of,
            specials,
            lowercase: true,
            hash,
        })
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(VocabError::EmptyVocab);
        }
        let entries = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Disables lowercasing and accent stripping.
    pub fn cased(mut self) -> Self {
        self.lowercase = false;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    /// Hex SHA-256 over the entries, used to tie example files to a vocab.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.id_of.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn tokenize(&self, text: &str) -> Vec<SubToken> {
        self.tokenize_with_offsets(text)
            .into_iter()
            .map(|(t, _, _)| t)
            .collect()
    }

    /// Tokenizes and reports, for every subtoken, the character range of the
    /// word it came from.
    pub fn tokenize_with_offsets(&self, text: &str) -> Vec<(SubToken, usize, usize)> {
        let mut out = Vec::new();
        for word in pre_tokenize(text, self.lowercase) {
            for piece in self.wordpiece(&word.text) {
                out.push((piece, word.start, word.end));
            }
        }
        out
    }

    /// Greedy longest-match-first split of one normalized word.
    pub fn wordpiece(&self, word: &str) -> Vec<SubToken> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        let unk = || {
            vec![SubToken {
                id: self.specials.unk,
                surface: UNK.to_string(),
                is_continuation: false,
            }]
        };
        if chars.len() > MAX_WORD_CHARS {
            return unk();
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let body: String = chars[start..end].iter().collect();
                let surface = if start > 0 {
                    format!("{CONTINUATION}{body}")
                } else {
                    body
                };
                if let Some(id) = self.id(&surface) {
                    found = Some(SubToken {
                        id,
                        surface,
                        is_continuation: start > 0,
                    });
                    break;
                }
                end -= 1;
            }
            match found {
                Some(tok) => pieces.push(tok),
                None => return unk(),
            }
            start = end;
        }
        pieces
    }

    pub fn ids_of(&self, tokens: &[SubToken]) -> Result<Vec<TokenId>, TokenizeError> {
        tokens
            .iter()
            .map(|t| match self.id(&t.surface) {
                Some(id) if id == t.id => Ok(id),
                _ => Err(TokenizeError::UnknownSurface(t.surface.clone())),
            })
            .collect()
    }

    /// Builds a `SubToken` for an id of this vocab.
    pub fn sub_token(&self, id: TokenId) -> Option<SubToken> {
        self.surface(id).map(|s| SubToken {
            id,
            surface: s.to_string(),
            is_continuation: s.starts_with(CONTINUATION) && s.len() > CONTINUATION.len(),
        })
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2000..=0x206F   // general punctuation
            | 0x3000..=0x303F // CJK symbols and punctuation
            | 0xFF01..=0xFF0F
            | 0xFF1A..=0xFF20
            | 0xA1 | 0xA7 | 0xAB | 0xB6 | 0xB7 | 0xBB | 0xBF)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F
        | 0x2B820..=0x2CEAF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

fn is_dropped(c: char) -> bool {
    c == '\0' || c == char::REPLACEMENT_CHARACTER || (c.is_control() && !c.is_whitespace())
}

fn normalize_word(word: &str, lowercase: bool) -> String {
    if lowercase {
        word.to_lowercase()
            .nfd()
            .filter(|&c| !is_combining_mark(c))
            .collect()
    } else {
        word.to_string()
    }
}

/// Whitespace and punctuation pre-split with optional lowercasing and accent
/// stripping. Punctuation and CJK characters become one-character words.
pub fn pre_tokenize(text: &str, lowercase: bool) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let flush = |current: &mut String, start: usize, end: usize, words: &mut Vec<Word>| {
        if !current.is_empty() {
            let text = normalize_word(current, lowercase);
            if !text.is_empty() {
                words.push(Word { text, start, end });
            }
            current.clear();
        }
    };
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_whitespace() {
            flush(&mut current, start, i, &mut words);
        } else if is_dropped(c) {
            // Removed without splitting the surrounding word.
            continue;
        } else if is_punctuation(c) || is_cjk(c) {
            flush(&mut current, start, i, &mut words);
            let text = normalize_word(&c.to_string(), lowercase);
            if !text.is_empty() {
                words.push(Word {
                    text,
                    start: i,
                    end: i + 1,
                });
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        }
    }
    flush(&mut current, start, n, &mut words);
    words
}

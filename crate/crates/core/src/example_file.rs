//! Binary example files.
//!
//! Layout: magic `SEGA`, version `u16`, header length `u32`, a JSON header
//! line, then `count` fixed-width records. All integers are little-endian.
//! A record is `kind u8, label tag u8, label a u32, label b u32`, followed by
//! `max_len` ids (`u32`), paragraph, sentence and token indices (`u16` each),
//! attention mask (`u8`) and MLM labels (`i32`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::example::{Example, ExampleKind, Labels, IGNORE_LABEL};

pub const MAGIC: &[u8; 4] = b"SEGA";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleFileHeader {
    pub max_len: usize,
    pub vocab_hash: String,
    pub count: usize,
    pub record_bytes: usize,
}

#[derive(Debug, Error)]
pub enum ExampleFileError {
    #[error("example file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an example file (bad magic)")]
    BadMagic,
    #[error("unsupported example file version {0}")]
    UnsupportedVersion(u16),
    #[error("bad example file header: {0}")]
    BadHeader(String),
    #[error("example file was built with vocab {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("corrupt record at byte offset {0}")]
    CorruptRecord(usize),
    #[error("example has length {found}, file max_len is {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

pub fn record_bytes(max_len: usize) -> usize {
    10 + max_len * (4 + 2 + 2 + 2 + 1 + 4)
}

fn encode(ex: &Example, buf: &mut Vec<u8>) {
    let (tag, a, b) = match &ex.labels {
        Labels::None => (0u8, 0u32, 0u32),
        Labels::Mlm(_) => (1, 0, 0),
        Labels::Class(c) => (2, *c, 0),
        Labels::Score(x) => (3, x.to_bits(), 0),
        Labels::Span { start, end } => (4, *start, *end),
    };
    buf.push(ex.kind.code());
    buf.push(tag);
    buf.extend_from_slice(&a.to_le_bytes());
    buf.extend_from_slice(&b.to_le_bytes());
    for &id in &ex.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for arr in [&ex.p, &ex.s, &ex.t] {
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&ex.attn_mask);
    match &ex.labels {
        Labels::Mlm(labels) => {
            for &l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        _ => {
            for _ in 0..ex.max_len() {
                buf.extend_from_slice(&IGNORE_LABEL.to_le_bytes());
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExampleFileError> {
        if self.pos + n > self.bytes.len() {
            return Err(ExampleFileError::CorruptRecord(self.base));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ExampleFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ExampleFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ExampleFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, ExampleFileError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8], offset: usize, max_len: usize) -> Result<Example, ExampleFileError> {
    let corrupt = || ExampleFileError::CorruptRecord(offset);
    let mut c = Cursor {
        bytes,
        pos: offset,
        base: offset,
    };
    let kind = ExampleKind::from_code(c.u8()?).ok_or_else(corrupt)?;
    let tag = c.u8()?;
    let a = c.u32()?;
    let b = c.u32()?;
    let ids = (0..max_len).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
    let p = (0..max_len).map(|_| c.u16()).collect::<Result<Vec<_>, _>>()?;
    let s = (0..max_len).map(|_| c.u16()).collect::<Result<Vec<_>, _>>()?;
    let t = (0..max_len).map(|_| c.u16()).collect::<Result<Vec<_>, _>>()?;
    let attn_mask = c.take(max_len)?.to_vec();
    if attn_mask.iter().any(|&m| m > 1) {
        return Err(corrupt());
    }
    let mlm = (0..max_len).map(|_| c.i32()).collect::<Result<Vec<_>, _>>()?;
    let labels = match tag {
        0 => Labels::None,
        1 => Labels::Mlm(mlm),
        2 => Labels::Class(a),
        3 => Labels::Score(f32::from_bits(a)),
        4 => Labels::Span { start: a, end: b },
        _ => return Err(corrupt()),
    };
    Ok(Example {
        ids,
        p,
        s,
        t,
        attn_mask,
        kind,
        labels,
    })
}

/// Writes all examples; every example must have length `max_len`.
pub fn write_examples(
    path: impl AsRef<Path>,
    max_len: usize,
    vocab_hash: &str,
    xs: &[Example],
) -> Result<usize, ExampleFileError> {
    for ex in xs {
        let mlm_len = match &ex.labels {
            Labels::Mlm(l) => l.len(),
            _ => max_len,
        };
        let lens = [ex.p.len(), ex.s.len(), ex.t.len(), ex.attn_mask.len(), mlm_len];
        if let Some(&bad) = lens.iter().find(|&&l| l != max_len) {
            return Err(ExampleFileError::LengthMismatch {
                expected: max_len,
                found: bad,
            });
        }
        if ex.max_len() != max_len {
            return Err(ExampleFileError::LengthMismatch {
                expected: max_len,
                found: ex.max_len(),
            });
        }
    }
    let header = ExampleFileHeader {
        max_len,
        vocab_hash: vocab_hash.to_string(),
        count: xs.len(),
        record_bytes: record_bytes(max_len),
    };
    let mut json = serde_json::to_vec(&header).map_err(|e| ExampleFileError::BadHeader(e.to_string()))?;
    json.push(b'\n');
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(header.record_bytes);
    for ex in xs {
        buf.clear();
        encode(ex, &mut buf);
        debug_assert_eq!(buf.len(), header.record_bytes);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(xs.len())
}

/// Reads a file without checking its vocab hash.
pub fn read_examples_any(
    path: impl AsRef<Path>,
) -> Result<(ExampleFileHeader, Vec<Example>), ExampleFileError> {
    let bytes = fs::read(path)?;
    parse_examples(&bytes)
}

pub fn parse_examples(bytes: &[u8]) -> Result<(ExampleFileHeader, Vec<Example>), ExampleFileError> {
    if bytes.len() < 10 {
        return Err(ExampleFileError::BadMagic);
    }
    if &bytes[..4] != MAGIC {
        return Err(ExampleFileError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ExampleFileError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = 10 + hlen;
    if bytes.len() < body {
        return Err(ExampleFileError::BadHeader("header truncated".into()));
    }
    let header: ExampleFileHeader = serde_json::from_slice(&bytes[10..body])
        .map_err(|e| ExampleFileError::BadHeader(e.to_string()))?;
    if header.record_bytes != record_bytes(header.max_len) {
        return Err(ExampleFileError::BadHeader("record width does not match max_len".into()));
    }
    let mut xs = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let offset = body + i * header.record_bytes;
        xs.push(decode(bytes, offset, header.max_len)?);
    }
    let end = body + header.count * header.record_bytes;
    if bytes.len() != end {
        return Err(ExampleFileError::CorruptRecord(end.min(bytes.len())));
    }
    Ok((header, xs))
}

/// Reads a file and rejects it unless it was built with `vocab_hash`.
pub fn read_examples(
    path: impl AsRef<Path>,
    vocab_hash: &str,
) -> Result<Vec<Example>, ExampleFileError> {
    let (header, xs) = read_examples_any(path)?;
    if header.vocab_hash != vocab_hash {
        return Err(ExampleFileError::VocabMismatch {
            expected: vocab_hash.to_string(),
            found: header.vocab_hash,
        });
    }
    Ok(xs)
}

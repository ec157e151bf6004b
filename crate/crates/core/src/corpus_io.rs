//! On-disk formats.
//!
//! All binary formats are little-endian and end in a CRC32 of every
//! preceding byte.
//!
//! ```text
//! DSGA corpus   "DSGA" | version u32 | d_model u32 | n_sequences u64 | n_tokens u64
//!               | n_sequences × (offset u64, length u64, tag_len u16, tag utf-8)
//!               | n_tokens × d_model f32 | crc32
//! DSGW weights  "DSGW" | version u32 | d_model u32 | d_sae u32
//!               | w_enc | b_enc | w_dec | b_dec | jump_theta (all f32) | crc32
//! DSGS stats    "DSGS" | version u32 | d_sae u32 | n_tokens u64 | d_sae × f64 | crc32
//! ```
//!
//! The high bit of the DSGA version word marks the reserved feature-space
//! variant, which version 1 readers reject.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{DsgError, FormatError, Result};
use crate::feature_stats::FeatureStats;
use crate::matrix::Matrix;
use crate::sae::{HiddenBlock, SaeParams};

pub const CORPUS_MAGIC: [u8; 4] = *b"DSGA";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"DSGW";
pub const STATS_MAGIC: [u8; 4] = *b"DSGS";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_SPACE_FLAG: u32 = 1 << 31;

const CORPUS_HEADER_LEN: usize = 28;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpan {
    pub offset: u64,
    pub length: u64,
    pub tag: String,
}

impl SequenceSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset as usize..(self.offset + self.length) as usize
    }
}

/// Token-major hidden states with sequence boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCorpus {
    d_model: usize,
    sequences: Vec<SequenceSpan>,
    data: Vec<f32>,
}

impl ActivationCorpus {
    pub fn new(d_model: usize, sequences: Vec<SequenceSpan>, data: Vec<f32>) -> Result<Self> {
        if d_model == 0 {
            return Err(DsgError::invalid("d_model must be positive"));
        }
        let mut expected = 0u64;
        for (i, s) in sequences.iter().enumerate() {
            if s.length == 0 {
                return Err(DsgError::invalid(format!("sequence {i} ({:?}) is empty", s.tag)));
            }
            if s.offset != expected {
                return Err(DsgError::invalid(format!(
                    "sequence {i} starts at {} but previous span ended at {expected}",
                    s.offset
                )));
            }
            if s.tag.len() > u16::MAX as usize {
                return Err(DsgError::invalid(format!("sequence {i} tag exceeds 65535 bytes")));
            }
            expected += s.length;
        }
        if data.len() as u64 != expected * d_model as u64 {
            return Err(DsgError::DimensionMismatch {
                context: "corpus data",
                expected: expected as usize * d_model,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DsgError::invalid("corpus contains non-finite activations"));
        }
        Ok(ActivationCorpus {
            d_model,
            sequences,
            data,
        })
    }

    /// Builds a corpus from `(tag, row-major token data)` pairs.
    pub fn from_sequences(d_model: usize, seqs: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut spans = Vec::with_capacity(seqs.len());
        let mut data = Vec::new();
        let mut offset = 0u64;
        for (tag, rows) in seqs {
            if d_model == 0 || rows.len() % d_model != 0 {
                return Err(DsgError::DimensionMismatch {
                    context: "sequence rows",
                    expected: d_model,
                    found: rows.len(),
                });
            }
            let length = (rows.len() / d_model) as u64;
            spans.push(SequenceSpan { offset, length, tag });
            offset += length;
            data.extend_from_slice(&rows);
        }
        Self::new(d_model, spans, data)
    }

    /// Concatenates corpora of equal width, keeping sequence order.
    pub fn concat<'a, I: IntoIterator<Item = &'a ActivationCorpus>>(parts: I) -> Result<Self> {
        let mut d_model = None;
        let mut seqs = Vec::new();
        for c in parts {
            match d_model {
                None => d_model = Some(c.d_model),
                Some(d) if d != c.d_model => {
                    return Err(DsgError::DimensionMismatch {
                        context: "corpus concat",
                        expected: d,
                        found: c.d_model,
                    })
                }
                _ => {}
            }
            for (i, s) in c.sequences.iter().enumerate() {
                seqs.push((s.tag.clone(), c.sequence_rows(i).to_vec()));
            }
        }
        let d_model = d_model.ok_or(DsgError::Empty("corpus list"))?;
        Self::from_sequences(d_model, seqs)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_tokens(&self) -> usize {
        self.data.len() / self.d_model
    }

    pub fn n_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn spans(&self) -> &[SequenceSpan] {
        &self.sequences
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token_row(&self, t: usize) -> &[f32] {
        &self.data[t * self.d_model..(t + 1) * self.d_model]
    }

    pub fn sequence_rows(&self, i: usize) -> &[f32] {
        let r = self.sequences[i].range();
        &self.data[r.start * self.d_model..r.end * self.d_model]
    }

    /// Widened copy of one sequence's hidden states.
    pub fn sequence_block(&self, i: usize) -> HiddenBlock {
        let len = self.sequences[i].length as usize;
        Matrix::from_f32(len, self.d_model, self.sequence_rows(i)).expect("span matches data")
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&SequenceSpan, HiddenBlock)> + '_ {
        self.sequences
            .iter()
            .enumerate()
            .map(move |(i, s)| (s, self.sequence_block(i)))
    }

    /// Keeps the spans, replaces every sequence's hidden states.
    pub fn with_blocks(&self, blocks: &[HiddenBlock]) -> Result<Self> {
        if blocks.len() != self.sequences.len() {
            return Err(DsgError::DimensionMismatch {
                context: "replacement blocks",
                expected: self.sequences.len(),
                found: blocks.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for (s, b) in self.sequences.iter().zip(blocks) {
            if b.rows() as u64 != s.length || b.cols() != self.d_model {
                return Err(DsgError::invalid(format!(
                    "replacement block for {:?} has shape {}x{}",
                    s.tag,
                    b.rows(),
                    b.cols()
                )));
            }
            data.extend(b.to_f32());
        }
        Self::new(self.d_model, self.sequences.clone(), data)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&encode_corpus(self))
    }
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or_else(|| FormatError::InvalidLayout {
            offset: self.pos as u64,
            reason: "payload size overflows".into(),
        })?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> std::result::Result<u32, FormatError> {
        let offset = self.pos as u64;
        let word = self.u32()?;
        let flags = word & FEATURE_SPACE_FLAG;
        let version = word & !FEATURE_SPACE_FLAG;
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                offset,
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(flags)
    }

    /// Asserts exactly the 4 crc bytes remain and that they match.
    fn finish(&mut self) -> std::result::Result<(), FormatError> {
        let offset = self.pos;
        let stored = self.u32()?;
        if self.remaining() > 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.pos as u64,
                count: self.remaining() as u64,
            });
        }
        let computed = crc32fast::hash(&self.buf[..offset]);
        if stored != computed {
            return Err(FormatError::CrcMismatch {
                offset: offset as u64,
                stored,
                computed,
            });
        }
        Ok(())
    }
}

fn push_crc(buf: &mut Vec<u8>) {
    let crc = crc32fast::hash(buf);
    buf.extend_from_slice(&crc.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_corpus(corpus: &ActivationCorpus) -> Vec<u8> {
    let table: usize = corpus.sequences.iter().map(|s| 18 + s.tag.len()).sum();
    let mut buf = Vec::with_capacity(CORPUS_HEADER_LEN + table + corpus.data.len() * 4 + 4);
    buf.extend_from_slice(&CORPUS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(corpus.d_model as u32).to_le_bytes());
    buf.extend_from_slice(&(corpus.sequences.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(corpus.n_tokens() as u64).to_le_bytes());
    for s in &corpus.sequences {
        buf.extend_from_slice(&s.offset.to_le_bytes());
        buf.extend_from_slice(&s.length.to_le_bytes());
        buf.extend_from_slice(&(s.tag.len() as u16).to_le_bytes());
        buf.extend_from_slice(s.tag.as_bytes());
    }
    push_f32s(&mut buf, &corpus.data);
    push_crc(&mut buf);
    buf
}

struct CorpusHeader {
    d_model: usize,
    n_tokens: u64,
    spans: Vec<SequenceSpan>,
}

/// Parses magic, version, dimensions and the sequence table. `total_len`
/// bounds allocations before the payload is read.
fn parse_corpus_header(
    r: &mut ByteReader<'_>,
    total_len: u64,
) -> std::result::Result<CorpusHeader, FormatError> {
    r.magic(CORPUS_MAGIC)?;
    let flags_offset = r.pos as u64;
    let flags = r.version()?;
    if flags != 0 {
        return Err(FormatError::UnsupportedVariant {
            offset: flags_offset,
            flags,
        });
    }
    let d_offset = r.pos as u64;
    let d_model = r.u32()? as usize;
    if d_model == 0 {
        return Err(FormatError::InvalidLayout {
            offset: d_offset,
            reason: "d_model is zero".into(),
        });
    }
    let n_offset = r.pos as u64;
    let n_sequences = r.u64()?;
    let n_tokens = r.u64()?;
    // Each table entry takes at least 18 bytes.
    if n_sequences.saturating_mul(18) > total_len.saturating_sub(r.pos as u64) {
        return Err(FormatError::Truncated {
            offset: r.pos as u64,
            needed: n_sequences.saturating_mul(18),
            available: total_len,
        });
    }
    if n_tokens < n_sequences {
        return Err(FormatError::InvalidLayout {
            offset: n_offset,
            reason: format!("{n_sequences} sequences cannot fit in {n_tokens} tokens"),
        });
    }
    let mut spans = Vec::with_capacity(n_sequences as usize);
    let mut expected = 0u64;
    for i in 0..n_sequences {
        let entry = r.pos as u64;
        let offset = r.u64()?;
        let length = r.u64()?;
        let tag_len = r.u16()? as usize;
        let tag_bytes = r.take(tag_len)?;
        if offset != expected || length == 0 || length > n_tokens - expected {
            return Err(FormatError::InvalidLayout {
                offset: entry,
                reason: format!("sequence {i} span ({offset}, {length}) breaks contiguity"),
            });
        }
        let tag = std::str::from_utf8(tag_bytes)
            .map_err(|_| FormatError::InvalidLayout {
                offset: entry + 18,
                reason: format!("sequence {i} tag is not utf-8"),
            })?
            .to_owned();
        expected += length;
        spans.push(SequenceSpan { offset, length, tag });
    }
    if expected != n_tokens {
        return Err(FormatError::InvalidLayout {
            offset: n_offset + 8,
            reason: format!("spans cover {expected} tokens, header says {n_tokens}"),
        });
    }
    let payload = n_tokens
        .checked_mul(d_model as u64)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| FormatError::InvalidLayout {
            offset: n_offset + 8,
            reason: "payload size overflows".into(),
        })?;
    if payload > total_len.saturating_sub(r.pos as u64) {
        return Err(FormatError::Truncated {
            offset: r.pos as u64,
            needed: payload,
            available: total_len,
        });
    }
    Ok(CorpusHeader {
        d_model,
        n_tokens,
        spans,
    })
}

pub fn decode_corpus(bytes: &[u8]) -> Result<ActivationCorpus> {
    let mut r = ByteReader::new(bytes);
    let header = parse_corpus_header(&mut r, bytes.len() as u64)?;
    let data_offset = r.pos as u64;
    let data = r.f32s(header.n_tokens as usize * header.d_model)?;
    r.finish()?;
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::InvalidLayout {
            offset: data_offset + 4 * i as u64,
            reason: "non-finite activation".into(),
        }
        .into());
    }
    ActivationCorpus::new(header.d_model, header.spans, data)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &ActivationCorpus) -> Result<()> {
    write_atomic(path.as_ref(), &encode_corpus(corpus))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<ActivationCorpus> {
    decode_corpus(&std::fs::read(path)?)
}

/// Sequence-at-a-time reader. Memory beyond the header is one sequence block.
/// The CRC is verified after the last sequence; a mismatch surfaces as the
/// final item, so callers that need all-or-nothing semantics should buffer
/// their side effects until the iterator is exhausted.
pub struct CorpusReader<R: Read> {
    inner: R,
    hasher: crc32fast::Hasher,
    d_model: usize,
    spans: Vec<SequenceSpan>,
    pos: u64,
    next: usize,
    done: bool,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::new(BufReader::new(file), len)
    }
}

impl<R: Read> CorpusReader<R> {
    pub fn new(mut inner: R, total_len: u64) -> Result<Self> {
        // Fixed header first, then the variable-length table.
        let mut head = vec![0u8; CORPUS_HEADER_LEN];
        read_exact_at(&mut inner, &mut head, 0, total_len)?;
        let n_sequences = u64::from_le_bytes(head[12..20].try_into().unwrap());
        let mut buf = head;
        for _ in 0..n_sequences.min(total_len / 18) {
            let start = buf.len();
            buf.resize(start + 18, 0);
            read_exact_at(&mut inner, &mut buf[start..], start as u64, total_len)?;
            let tag_len = u16::from_le_bytes(buf[start + 16..start + 18].try_into().unwrap());
            let t0 = buf.len();
            buf.resize(t0 + tag_len as usize, 0);
            read_exact_at(&mut inner, &mut buf[t0..], t0 as u64, total_len)?;
        }
        let mut r = ByteReader::new(&buf);
        let header = parse_corpus_header(&mut r, total_len)?;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&buf);
        Ok(CorpusReader {
            inner,
            hasher,
            d_model: header.d_model,
            spans: header.spans,
            pos: buf.len() as u64,
            next: 0,
            done: false,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn spans(&self) -> &[SequenceSpan] {
        &self.spans
    }

    fn read_next(&mut self) -> Result<Option<(SequenceSpan, HiddenBlock)>> {
        if self.next == self.spans.len() {
            let mut crc = [0u8; 4];
            read_exact_at(&mut self.inner, &mut crc, self.pos, self.pos + 4)?;
            let stored = u32::from_le_bytes(crc);
            let computed = self.hasher.clone().finalize();
            if stored != computed {
                return Err(FormatError::CrcMismatch {
                    offset: self.pos,
                    stored,
                    computed,
                }
                .into());
            }
            let mut probe = [0u8; 1];
            if self.inner.read(&mut probe)? != 0 {
                return Err(FormatError::TrailingBytes {
                    offset: self.pos + 4,
                    count: 1,
                }
                .into());
            }
            return Ok(None);
        }
        let span = self.spans[self.next].clone();
        let mut bytes = vec![0u8; span.length as usize * self.d_model * 4];
        read_exact_at(&mut self.inner, &mut bytes, self.pos, self.pos)?;
        self.hasher.update(&bytes);
        let offset = self.pos;
        self.pos += bytes.len() as u64;
        self.next += 1;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::InvalidLayout {
                offset,
                reason: "non-finite activation".into(),
            }
            .into());
        }
        Ok(Some((
            span.clone(),
            Matrix::from_vec(span.length as usize, self.d_model, data)?,
        )))
    }
}

impl<R: Read> Iterator for CorpusReader<R> {
    type Item = Result<(SequenceSpan, HiddenBlock)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_next() {
            Ok(Some(item)) => Some(Ok(item)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, available: u64) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(FormatError::Truncated {
            offset,
            needed: buf.len() as u64,
            available,
        }
        .into()),
        Err(e) => Err(e.into()),
    }
}

pub fn encode_weights(p: &SaeParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * (2 * p.d_sae() * p.d_model() + 2 * p.d_sae() + p.d_model()) + 4);
    buf.extend_from_slice(&WEIGHTS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.d_model() as u32).to_le_bytes());
    buf.extend_from_slice(&(p.d_sae() as u32).to_le_bytes());
    push_f32s(&mut buf, p.w_enc());
    push_f32s(&mut buf, p.b_enc());
    push_f32s(&mut buf, p.w_dec());
    push_f32s(&mut buf, p.b_dec());
    push_f32s(&mut buf, p.jump_theta());
    push_crc(&mut buf);
    buf
}

pub fn decode_weights(bytes: &[u8]) -> Result<SaeParams> {
    let mut r = ByteReader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    let voff = r.pos as u64;
    let flags = r.version()?;
    if flags != 0 {
        return Err(FormatError::UnsupportedVariant { offset: voff, flags }.into());
    }
    let dim_offset = r.pos as u64;
    let d_model = r.u32()? as usize;
    let d_sae = r.u32()? as usize;
    if d_model == 0 || d_sae == 0 {
        return Err(FormatError::InvalidLayout {
            offset: dim_offset,
            reason: "zero dimension".into(),
        }
        .into());
    }
    let w_enc = r.f32s(d_sae * d_model)?;
    let b_enc = r.f32s(d_sae)?;
    let w_dec = r.f32s(d_sae * d_model)?;
    let b_dec = r.f32s(d_model)?;
    let theta = r.f32s(d_sae)?;
    r.finish()?;
    SaeParams::new(d_model, d_sae, w_enc, b_enc, w_dec, b_dec, theta).map_err(|e| {
        DsgError::from(FormatError::InvalidLayout {
            offset: 16,
            reason: e.to_string(),
        })
    })
}

pub fn write_weights(path: impl AsRef<Path>, p: &SaeParams) -> Result<()> {
    write_atomic(path.as_ref(), &encode_weights(p))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<SaeParams> {
    decode_weights(&std::fs::read(path)?)
}

pub fn encode_stats(s: &FeatureStats) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 8 * s.sum_sq().len());
    buf.extend_from_slice(&STATS_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(s.sum_sq().len() as u32).to_le_bytes());
    buf.extend_from_slice(&s.n_tokens().to_le_bytes());
    for v in s.sum_sq() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    push_crc(&mut buf);
    buf
}

pub fn decode_stats(bytes: &[u8]) -> Result<FeatureStats> {
    let mut r = ByteReader::new(bytes);
    r.magic(STATS_MAGIC)?;
    let voff = r.pos as u64;
    let flags = r.version()?;
    if flags != 0 {
        return Err(FormatError::UnsupportedVariant { offset: voff, flags }.into());
    }
    let d_sae = r.u32()? as usize;
    let n_tokens = r.u64()?;
    let data_offset = r.pos as u64;
    let raw = r.take(d_sae.checked_mul(8).ok_or_else(|| FormatError::InvalidLayout {
        offset: 8,
        reason: "payload size overflows".into(),
    })?)?;
    let sum_sq: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    FeatureStats::from_parts(sum_sq, n_tokens).map_err(|e| {
        FormatError::InvalidLayout {
            offset: data_offset,
            reason: e.to_string(),
        }
        .into()
    })
}

pub fn write_stats(path: impl AsRef<Path>, s: &FeatureStats) -> Result<()> {
    write_atomic(path.as_ref(), &encode_stats(s))
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<FeatureStats> {
    decode_stats(&std::fs::read(path)?)
}

/// Calibrated guardrail applied at inference.
///
/// `tau` is absent until calibration has run. Unknown top-level fields are
/// kept in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailConfig {
    pub feature_ids: Vec<usize>,
    pub tau: Option<f64>,
    pub clamp_c: f64,
    pub p_ratio: Option<f64>,
    pub p_dyn: Option<f64>,
    pub n_feats: usize,
    #[serde(default)]
    pub provenance: Map<String, Value>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl GuardrailConfig {
    pub fn new(feature_ids: Vec<usize>, clamp_c: f64) -> Self {
        let n_feats = feature_ids.len();
        GuardrailConfig {
            feature_ids,
            tau: None,
            clamp_c,
            p_ratio: None,
            p_dyn: None,
            n_feats,
            provenance: Map::new(),
            extra: Map::new(),
        }
    }

    /// Document-level checks. Pass `d_sae` to also bound the feature ids.
    /// An empty feature list is accepted here and rejected at guard time.
    pub fn validate(&self, d_sae: Option<usize>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &j in &self.feature_ids {
            if !seen.insert(j) {
                return Err(DsgError::config(format!("feature id {j} listed twice")));
            }
            if let Some(d) = d_sae {
                if j >= d {
                    return Err(DsgError::config(format!(
                        "feature id {j} out of range for dictionary width {d}"
                    )));
                }
            }
        }
        if let Some(tau) = self.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(DsgError::config(format!("tau {tau} outside [0, 1]")));
            }
        }
        if !(self.clamp_c.is_finite() && self.clamp_c > 0.0) {
            return Err(DsgError::config(format!(
                "clamp_c must be a positive real, got {}",
                self.clamp_c
            )));
        }
        for (name, p) in [("p_ratio", self.p_ratio), ("p_dyn", self.p_dyn)] {
            if let Some(p) = p {
                if !(0.0..=100.0).contains(&p) {
                    return Err(DsgError::config(format!("{name} {p} outside [0, 100]")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, d_sae: Option<usize>) -> Result<Self> {
        let cfg: GuardrailConfig = serde_json::from_str(text)?;
        cfg.validate(d_sae)?;
        Ok(cfg)
    }
}

pub fn write_config(path: impl AsRef<Path>, cfg: &GuardrailConfig) -> Result<()> {
    write_atomic(path.as_ref(), cfg.to_json()?.as_bytes())
}

pub fn read_config(path: impl AsRef<Path>, d_sae: Option<usize>) -> Result<GuardrailConfig> {
    GuardrailConfig::from_json(&std::fs::read_to_string(path)?, d_sae)
}

/// Reads a manual feature list: ids separated by whitespace or commas, `#`
/// starts a comment.
pub fn parse_feature_list(text: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            ids.push(
                tok.parse::<usize>()
                    .map_err(|_| DsgError::config(format!("bad feature id {tok:?}")))?,
            );
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_corpus() -> ActivationCorpus {
        ActivationCorpus::from_sequences(
            2,
            vec![
                ("a".into(), vec![0.5, -1.0]),
                ("doc-b".into(), (0..10).map(|i| i as f32 * 0.25).collect()),
                ("c".into(), vec![1.0, 2.0, 3.0, 4.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn minimal_corpus_rewrites_identically() {
        let c = ActivationCorpus::from_sequences(1, vec![("x".into(), vec![3.5])]).unwrap();
        let bytes = encode_corpus(&c);
        let back = decode_corpus(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_corpus(&back), bytes);
    }

    #[test]
    fn spans_are_prefix_sums() {
        let c = ActivationCorpus::from_sequences(
            1,
            vec![
                ("a".into(), vec![0.0]),
                ("b".into(), vec![0.0; 5]),
                ("c".into(), vec![0.0; 2]),
            ],
        )
        .unwrap();
        let back = decode_corpus(&encode_corpus(&c)).unwrap();
        let spans: Vec<_> = back.spans().iter().map(|s| (s.offset, s.length)).collect();
        assert_eq!(spans, vec![(0, 1), (1, 5), (6, 2)]);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode_corpus(&sample_corpus());
        for cut in 0..bytes.len() {
            let err = decode_corpus(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, DsgError::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = encode_corpus(&sample_corpus());
        bytes[0] = b'X';
        assert!(matches!(
            decode_corpus(&bytes),
            Err(DsgError::Format(FormatError::BadMagic { .. }))
        ));
        let mut bytes = encode_corpus(&sample_corpus());
        bytes[4] = 2;
        assert!(matches!(
            decode_corpus(&bytes),
            Err(DsgError::Format(FormatError::VersionMismatch { offset: 4, found: 2, .. }))
        ));
        let mut bytes = encode_corpus(&sample_corpus());
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(
            decode_corpus(&bytes),
            Err(DsgError::Format(FormatError::CrcMismatch { .. }))
        ));
        let mut bytes = encode_corpus(&sample_corpus());
        bytes.push(0);
        assert!(matches!(
            decode_corpus(&bytes),
            Err(DsgError::Format(FormatError::TrailingBytes { .. }))
        ));
    }

    #[test]
    fn feature_space_variant_is_reserved() {
        let mut bytes = encode_corpus(&sample_corpus());
        let word = FORMAT_VERSION | FEATURE_SPACE_FLAG;
        bytes[4..8].copy_from_slice(&word.to_le_bytes());
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_corpus(&bytes),
            Err(DsgError::Format(FormatError::UnsupportedVariant { offset: 4, .. }))
        ));
    }

    #[test]
    fn corpus_constructor_rejects_gaps_and_empty_spans() {
        let span = |offset, length| SequenceSpan {
            offset,
            length,
            tag: String::new(),
        };
        assert!(ActivationCorpus::new(1, vec![span(0, 1), span(2, 1)], vec![0.0; 3]).is_err());
        assert!(ActivationCorpus::new(1, vec![span(0, 0)], vec![]).is_err());
        assert!(ActivationCorpus::new(1, vec![span(0, 2)], vec![0.0; 3]).is_err());
        assert!(ActivationCorpus::new(1, vec![span(0, 1)], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn streaming_reader_visits_in_order_and_checks_crc() {
        let c = sample_corpus();
        let bytes = encode_corpus(&c);
        let reader = CorpusReader::new(&bytes[..], bytes.len() as u64).unwrap();
        let items: Vec<_> = reader.collect::<Result<Vec<_>>>().unwrap();
        assert_eq!(items.len(), 3);
        for (i, (span, block)) in items.iter().enumerate() {
            assert_eq!(span, &c.spans()[i]);
            assert!(block.bit_eq(&c.sequence_block(i)));
        }

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x40;
        let results: Vec<_> = CorpusReader::new(&bad[..], n as u64).unwrap().collect();
        assert!(matches!(
            results.last().unwrap(),
            Err(DsgError::Format(FormatError::CrcMismatch { .. }))
        ));

        let tr = &bytes[..bytes.len() - 9];
        let results: Vec<_> = CorpusReader::new(tr, tr.len() as u64)
            .map(|r| r.collect::<Vec<_>>())
            .unwrap_or_else(|e| vec![Err(e)]);
        assert!(results.iter().any(|r| r.is_err()));
    }

    #[test]
    fn weights_round_trip() {
        let p = crate::sae::init_params(3, 5, 4).unwrap();
        let bytes = encode_weights(&p);
        assert_eq!(&bytes[..4], b"DSGW");
        assert_eq!(bytes.len(), 16 + 4 * (2 * 15 + 5 + 3 + 5) + 4);
        assert_eq!(decode_weights(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(
            decode_weights(&bad),
            Err(DsgError::Format(FormatError::CrcMismatch { .. }))
        ));
    }

    #[test]
    fn stats_round_trip() {
        let s = FeatureStats::from_parts(vec![1.5, 0.0, 2.25], 7).unwrap();
        assert_eq!(decode_stats(&encode_stats(&s)).unwrap(), s);
    }

    #[test]
    fn config_round_trips_with_default_recipe() {
        let mut cfg = GuardrailConfig::new(vec![12382, 9722], 500.0);
        cfg.tau = Some(0.6);
        let text = cfg.to_json().unwrap();
        let back = GuardrailConfig::from_json(&text, Some(16384)).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn config_preserves_unknown_fields() {
        let text = r#"{"feature_ids":[1,2],"tau":0.5,"clamp_c":10.0,"p_ratio":95.0,"p_dyn":95.0,
            "n_feats":2,"provenance":{"who":"me"},"reviewer_note":{"ok":true}}"#;
        let cfg = GuardrailConfig::from_json(text, None).unwrap();
        let again = GuardrailConfig::from_json(&cfg.to_json().unwrap(), None).unwrap();
        assert_eq!(again.extra.get("reviewer_note"), Some(&serde_json::json!({"ok": true})));
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GuardrailConfig::new(vec![], 500.0);
        assert!(cfg.validate(Some(10)).is_ok());
        cfg.tau = Some(1.5);
        assert!(matches!(cfg.validate(None), Err(DsgError::Config(_))));
        cfg.tau = Some(0.5);
        cfg.feature_ids = vec![3, 3];
        assert!(cfg.validate(None).is_err());
        cfg.feature_ids = vec![10];
        assert!(cfg.validate(Some(10)).is_err());
        assert!(cfg.validate(None).is_ok());
        cfg.clamp_c = 0.0;
        assert!(cfg.validate(None).is_err());
        assert!(GuardrailConfig::from_json("{not json", None).is_err());
    }

    #[test]
    fn feature_list_parsing() {
        let ids = parse_feature_list("12382\n9722, 5 # comment\n\n# all comment\n7").unwrap();
        assert_eq!(ids, vec![12382, 9722, 5, 7]);
        assert!(parse_feature_list("12 x").is_err());
    }

    #[test]
    fn file_round_trip_is_atomic_rename() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dsga");
        write_corpus(&path, &sample_corpus()).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), sample_corpus());
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}

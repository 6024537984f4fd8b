//! Self-contained binary index files.
//!
//! Layout, little-endian:
//!
//! ```text
//! header (48 bytes)
//!   magic "VEXGIDX\0" | version | flags | count | dim | padded_dim
//!   | degree | metric | entry | reserved | crc32(previous 44 bytes)
//! sections, in this order, each  tag u32 | length u64 | payload | crc32(tag, length, payload)
//!   1 adjacency     count * degree u32
//!   2 vectors       count * padded_dim f32
//!   3 permutation   count u32 (original id -> position)      flag bit 0
//!   4 codec         kind u32, codec parameters, codes        flag bit 1
//!   5 early_term    ef, threshold, patience as u32           flag bit 2
//! ```
//!
//! Flag bit 3 marks vectors stored outside the file; it is reserved and rejected.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::dataset::{padded_dim, Metric, VectorDataset};
use crate::graph::ProximityGraph;
use crate::index::{Index, TunedEarlyTerm};
use crate::quantization::{Codec, PqCodec, QuantizedVectors, SqCodec, PQ_CENTROIDS};
use crate::reorder::Permutation;

pub const MAGIC: [u8; 8] = *b"VEXGIDX\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;
const SECTION_OVERHEAD: usize = 4 + 8 + 4;

pub const FLAG_PERMUTATION: u32 = 1;
pub const FLAG_CODEC: u32 = 1 << 1;
pub const FLAG_EARLY_TERM: u32 = 1 << 2;
pub const FLAG_EXTERNAL_VECTORS: u32 = 1 << 3;
const KNOWN_FLAGS: u32 = FLAG_PERMUTATION | FLAG_CODEC | FLAG_EARLY_TERM | FLAG_EXTERNAL_VECTORS;

const CODEC_SQ: u32 = 1;
const CODEC_PQ: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Header,
    Adjacency,
    Vectors,
    Permutation,
    Codec,
    EarlyTerm,
    Trailer,
}

impl Section {
    fn tag(self) -> u32 {
        match self {
            Section::Adjacency => 1,
            Section::Vectors => 2,
            Section::Permutation => 3,
            Section::Codec => 4,
            Section::EarlyTerm => 5,
            Section::Header | Section::Trailer => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Section::Header => "header",
            Section::Adjacency => "adjacency",
            Section::Vectors => "vectors",
            Section::Permutation => "permutation",
            Section::Codec => "codec",
            Section::EarlyTerm => "early_term",
            Section::Trailer => "trailer",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Problem {
    BadMagic,
    UnsupportedVersion(u32),
    UnknownFlags(u32),
    ExternalVectors,
    Truncated { needed: u64, available: u64 },
    Checksum { stored: u32, computed: u32 },
    Malformed(String),
    TrailingBytes(usize),
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Problem::BadMagic => f.write_str("bad magic, not an index file"),
            Problem::UnsupportedVersion(v) => write!(f, "unsupported version {v}, this build reads version {VERSION}"),
            Problem::UnknownFlags(bits) => write!(f, "unknown flag bits {bits:#x}"),
            Problem::ExternalVectors => f.write_str("externally stored vectors are not supported"),
            Problem::Truncated { needed, available } => write!(f, "truncated: needs {needed} bytes, {available} available"),
            Problem::Checksum { stored, computed } => {
                write!(f, "checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")
            }
            Problem::Malformed(msg) => f.write_str(msg),
            Problem::TrailingBytes(n) => write!(f, "{n} unexpected bytes after the last section"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{section}: {problem}")]
    Format { section: Section, problem: Problem },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl PersistError {
    fn new(section: Section, problem: Problem) -> Self {
        PersistError::Format { section, problem }
    }

    fn malformed(section: Section, msg: impl Into<String>) -> Self {
        Self::new(section, Problem::Malformed(msg.into()))
    }

    pub fn section(&self) -> Option<Section> {
        match self {
            PersistError::Format { section, .. } => Some(*section),
            PersistError::Io(_) => None,
        }
    }

    pub fn problem(&self) -> Option<&Problem> {
        match self {
            PersistError::Format { problem, .. } => Some(problem),
            PersistError::Io(_) => None,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32s(out: &mut Vec<u8>, vs: impl IntoIterator<Item = u32>) {
    for v in vs {
        put_u32(out, v);
    }
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> u32 {
    u32::try_from(v).unwrap_or_else(|_| panic!("{what} = {v} does not fit the index format"))
}

fn write_section(out: &mut Vec<u8>, section: Section, payload: &[u8]) {
    let start = out.len();
    put_u32(out, section.tag());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
}

/// Serializes an index to bytes.
pub fn encode_index(index: &Index) -> Vec<u8> {
    let graph = index.graph();
    let data = index.data();
    let n = index.len();
    let mut flags = 0;
    if index.permutation().is_some() {
        flags |= FLAG_PERMUTATION;
    }
    if index.codes().is_some() {
        flags |= FLAG_CODEC;
    }
    if index.early_term().is_some() {
        flags |= FLAG_EARLY_TERM;
    }

    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (graph.degree() + data.padded_dim()) + 4 * SECTION_OVERHEAD);
    out.extend_from_slice(&MAGIC);
    put_u32s(
        &mut out,
        [
            VERSION,
            flags,
            to_u32(n, "count"),
            to_u32(data.dim(), "dim"),
            to_u32(data.padded_dim(), "padded_dim"),
            to_u32(graph.degree(), "degree"),
            data.metric().code(),
            graph.entry(),
            0,
        ],
    );
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);

    let mut payload = Vec::with_capacity(4 * graph.adjacency().len());
    put_u32s(&mut payload, graph.adjacency().iter().copied());
    write_section(&mut out, Section::Adjacency, &payload);

    payload.clear();
    put_f32s(&mut payload, data.as_flat());
    write_section(&mut out, Section::Vectors, &payload);

    if let Some(p) = index.permutation() {
        payload.clear();
        put_u32s(&mut payload, p.forward().iter().copied());
        write_section(&mut out, Section::Permutation, &payload);
    }

    if let Some(codes) = index.codes() {
        payload.clear();
        match codes.codec() {
            Codec::Sq(sq) => {
                put_u32s(&mut payload, [CODEC_SQ, to_u32(sq.dim(), "sq dim")]);
                put_f32s(&mut payload, sq.lo());
                put_f32s(&mut payload, sq.hi());
            }
            Codec::Pq(pq) => {
                put_u32s(&mut payload, [CODEC_PQ, to_u32(pq.m(), "pq m"), to_u32(pq.sub_dim(), "pq sub_dim")]);
                put_f32s(&mut payload, pq.centroids());
            }
        }
        payload.extend_from_slice(codes.codes());
        write_section(&mut out, Section::Codec, &payload);
    }

    if let Some(t) = index.early_term() {
        payload.clear();
        put_u32s(&mut payload, [to_u32(t.ef, "ef"), to_u32(t.threshold, "threshold"), to_u32(t.patience, "patience")]);
        write_section(&mut out, Section::EarlyTerm, &payload);
    }
    out
}

/// Writes `index` to `path`.
pub fn save_index(index: &Index, path: impl AsRef<Path>) -> Result<(), PersistError> {
    std::fs::write(path, encode_index(index))?;
    Ok(())
}

/// Reads an index written by [`save_index`].
pub fn load_index(path: impl AsRef<Path>) -> Result<Index, PersistError> {
    decode_index(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, len: usize, section: Section) -> Result<&'a [u8], PersistError> {
        if len > self.remaining() {
            return Err(PersistError::new(
                section,
                Problem::Truncated { needed: len as u64, available: self.remaining() as u64 },
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, section: Section) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: Section) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }

    /// Reads one framed section, returning its verified payload.
    fn section(&mut self, section: Section, expected_len: Option<u64>) -> Result<&'a [u8], PersistError> {
        let start = self.pos;
        let tag = self.u32(section)?;
        if tag != section.tag() {
            return Err(PersistError::malformed(section, format!("expected tag {}, found {tag}", section.tag())));
        }
        let len = self.u64(section)?;
        if let Some(want) = expected_len {
            if len != want {
                return Err(PersistError::malformed(section, format!("length {len}, expected {want}")));
            }
        }
        let available = self.remaining() as u64;
        let needed = len.checked_add(4).ok_or_else(|| PersistError::malformed(section, "length overflows"))?;
        if needed > available {
            return Err(PersistError::new(section, Problem::Truncated { needed, available }));
        }
        let payload = self.take(len as usize, section)?;
        let computed = crc32fast::hash(&self.bytes[start..self.pos]);
        let stored = self.u32(section)?;
        if stored != computed {
            return Err(PersistError::new(section, Problem::Checksum { stored, computed }));
        }
        Ok(payload)
    }
}

fn u32s(bytes: &[u8]) -> impl Iterator<Item = u32> + '_ {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

fn product(section: Section, parts: &[u64]) -> Result<u64, PersistError> {
    parts
        .iter()
        .try_fold(1u64, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| PersistError::malformed(section, "size overflows"))
}

struct Header {
    flags: u32,
    count: usize,
    dim: usize,
    padded_dim: usize,
    degree: usize,
    metric: Metric,
    entry: u32,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, PersistError> {
    let h = Section::Header;
    let magic = r.take(MAGIC.len(), h)?;
    if magic != MAGIC {
        return Err(PersistError::new(h, Problem::BadMagic));
    }
    let version = r.u32(h)?;
    if version != VERSION {
        return Err(PersistError::new(h, Problem::UnsupportedVersion(version)));
    }
    let mut fields = [0u32; 8];
    for f in &mut fields {
        *f = r.u32(h)?;
    }
    let stored = r.u32(h)?;
    let computed = crc32fast::hash(&r.bytes[..HEADER_LEN - 4]);
    if stored != computed {
        return Err(PersistError::new(h, Problem::Checksum { stored, computed }));
    }
    let [flags, count, dim, padded, degree, metric, entry, reserved] = fields;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(PersistError::new(h, Problem::UnknownFlags(flags & !KNOWN_FLAGS)));
    }
    if flags & FLAG_EXTERNAL_VECTORS != 0 {
        return Err(PersistError::new(h, Problem::ExternalVectors));
    }
    if reserved != 0 {
        return Err(PersistError::malformed(h, "reserved field is not zero"));
    }
    let metric = Metric::from_code(metric).ok_or_else(|| PersistError::malformed(h, format!("unknown metric code {metric}")))?;
    if count == 0 || dim == 0 || degree == 0 {
        return Err(PersistError::malformed(h, "count, dim and degree must be positive"));
    }
    if padded as usize != padded_dim(dim as usize) {
        return Err(PersistError::malformed(h, format!("padded dimension {padded} does not match dim {dim}")));
    }
    if entry >= count {
        return Err(PersistError::malformed(h, format!("entry {entry} out of range for {count} nodes")));
    }
    Ok(Header {
        flags,
        count: count as usize,
        dim: dim as usize,
        padded_dim: padded as usize,
        degree: degree as usize,
        metric,
        entry,
    })
}

fn read_codec(payload: &[u8], h: &Header) -> Result<QuantizedVectors, PersistError> {
    let s = Section::Codec;
    let mut r = Reader { bytes: payload, pos: 0 };
    let kind = r.u32(s)?;
    let n = h.count as u64;
    let codec = match kind {
        CODEC_SQ => {
            let dim = r.u32(s)? as u64;
            if dim as usize != h.padded_dim {
                return Err(PersistError::malformed(s, format!("scalar codec covers {dim} dims, expected {}", h.padded_dim)));
            }
            let bounds = product(s, &[dim, 4])? as usize;
            let lo = f32s(r.take(bounds, s)?);
            let hi = f32s(r.take(bounds, s)?);
            Codec::Sq(SqCodec::from_bounds(lo, hi).map_err(|e| PersistError::malformed(s, e.to_string()))?)
        }
        CODEC_PQ => {
            let m = r.u32(s)? as u64;
            let sub_dim = r.u32(s)? as u64;
            let covered = product(s, &[m, sub_dim])?;
            if m == 0 || sub_dim == 0 || covered < h.padded_dim as u64 || covered - (h.padded_dim as u64) >= m {
                return Err(PersistError::malformed(s, format!("m = {m}, sub_dim = {sub_dim} do not fit dimension {}", h.padded_dim)));
            }
            let len = product(s, &[covered, PQ_CENTROIDS as u64, 4])?;
            if len > r.remaining() as u64 {
                return Err(PersistError::new(s, Problem::Truncated { needed: len, available: r.remaining() as u64 }));
            }
            let centroids = f32s(r.take(len as usize, s)?);
            Codec::Pq(
                PqCodec::from_parts(m as usize, sub_dim as usize, centroids)
                    .map_err(|e| PersistError::malformed(s, e.to_string()))?,
            )
        }
        other => return Err(PersistError::malformed(s, format!("unknown codec kind {other}"))),
    };
    let codes_len = product(s, &[n, codec.code_len() as u64])?;
    if codes_len != r.remaining() as u64 {
        return Err(PersistError::malformed(s, format!("{} code bytes, expected {codes_len}", r.remaining())));
    }
    let codes = r.take(codes_len as usize, s)?.to_vec();
    QuantizedVectors::from_parts(codec, h.metric, h.count, codes).map_err(|e| PersistError::malformed(s, e.to_string()))
}

/// Parses and validates an index image.
pub fn decode_index(bytes: &[u8]) -> Result<Index, PersistError> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let n = h.count as u64;

    let s = Section::Adjacency;
    let adjacency = r.section(s, Some(product(s, &[n, h.degree as u64, 4])?))?;
    let graph = ProximityGraph::from_adjacency(h.count, h.degree, u32s(adjacency).collect(), h.entry, h.metric)
        .map_err(|e| PersistError::malformed(s, e.to_string()))?;

    let s = Section::Vectors;
    let vectors = r.section(s, Some(product(s, &[n, h.padded_dim as u64, 4])?))?;
    let values = f32s(vectors);
    if let Some(i) = (0..h.count).find(|&i| values[i * h.padded_dim + h.dim..(i + 1) * h.padded_dim].iter().any(|&v| v != 0.0)) {
        return Err(PersistError::malformed(s, format!("row {i} has non-zero padding")));
    }
    let data = VectorDataset::from_padded(h.count, h.dim, h.metric, &values);

    let permutation = if h.flags & FLAG_PERMUTATION != 0 {
        let s = Section::Permutation;
        let payload = r.section(s, Some(product(s, &[n, 4])?))?;
        Some(Permutation::from_forward(u32s(payload).collect()).map_err(|e| PersistError::malformed(s, e.to_string()))?)
    } else {
        None
    };

    let codes = if h.flags & FLAG_CODEC != 0 {
        Some(read_codec(r.section(Section::Codec, None)?, &h)?)
    } else {
        None
    };

    let early_term = if h.flags & FLAG_EARLY_TERM != 0 {
        let s = Section::EarlyTerm;
        let v: Vec<u32> = u32s(r.section(s, Some(12))?).collect();
        let t = TunedEarlyTerm { ef: v[0] as usize, threshold: v[1] as usize, patience: v[2] as usize };
        if t.patience == 0 || t.threshold >= t.ef {
            return Err(PersistError::malformed(s, format!("invalid setting {t:?}")));
        }
        Some(t)
    } else {
        None
    };

    if r.remaining() != 0 {
        return Err(PersistError::new(Section::Trailer, Problem::TrailingBytes(r.remaining())));
    }
    Index::from_parts(graph, data, permutation, codes, early_term).map_err(|e| PersistError::malformed(Section::Adjacency, e.to_string()))
}

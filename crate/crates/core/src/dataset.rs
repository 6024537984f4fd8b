//! Vector storage, metrics and the `fvecs` / `bvecs` / `ivecs` file formats.
//!
//! Vectors live in one contiguous buffer of 64-byte aligned blocks. Every
//! vector is padded with zeros up to the next multiple of [`LANES`] scalars,
//! so a row always starts on a cache-line boundary and kernels never need a
//! scalar tail loop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Alignment quantum in `f32` lanes (16 × 4 bytes = one 64-byte cache line).
pub const LANES: usize = 16;

/// Smallest multiple of [`LANES`] that is `>= dim`.
pub fn padded_dim(dim: usize) -> usize {
    dim.div_ceil(LANES) * LANES
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty input: no vectors")]
    Empty,
    #[error("invalid dimension {value} in record header at byte offset {offset}")]
    InvalidDimension { offset: usize, value: i32 },
    #[error("truncated record at byte offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("record {record} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("vector {index} has zero norm and cannot be normalized for the angular metric")]
    ZeroVector { index: usize },
    #[error("negative id {value} in ivecs record {record}")]
    NegativeId { record: usize, value: i32 },
    #[error("value buffer of length {len} is not a multiple of dimension {dim}")]
    RaggedBuffer { len: usize, dim: usize },
}

/// Similarity metric. All metrics are "smaller is closer".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Squared Euclidean distance.
    SquaredL2,
    /// `-<q, x>`.
    NegativeInnerProduct,
    /// Squared Euclidean distance over unit-normalized vectors.
    Angular,
}

impl Metric {
    pub fn code(self) -> u32 {
        match self {
            Metric::SquaredL2 => 0,
            Metric::NegativeInnerProduct => 1,
            Metric::Angular => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Metric::SquaredL2),
            1 => Some(Metric::NegativeInnerProduct),
            2 => Some(Metric::Angular),
            _ => None,
        }
    }

    /// Whether distances under this metric are squared Euclidean.
    pub fn is_euclidean(self) -> bool {
        !matches!(self, Metric::NegativeInnerProduct)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SquaredL2 => "l2",
            Metric::NegativeInnerProduct => "ip",
            Metric::Angular => "angular",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "euclidean" | "squared_l2" => Ok(Metric::SquaredL2),
            "ip" | "inner_product" | "negative_inner_product" => Ok(Metric::NegativeInnerProduct),
            "angular" | "cosine" => Ok(Metric::Angular),
            other => Err(format!("unknown metric '{other}' (expected l2, ip or angular)")),
        }
    }
}

/// Unpadded vectors as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVectors {
    dim: usize,
    values: Vec<f32>,
}

impl RawVectors {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::InvalidDimension { offset: 0, value: 0 });
        }
        if !values.len().is_multiple_of(dim) {
            return Err(DataError::RaggedBuffer { len: values.len(), dim });
        }
        Ok(Self { dim, values })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, DataError> {
        let first = rows.first().ok_or(DataError::Empty)?.as_ref().len();
        let mut values = Vec::with_capacity(first * rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != first {
                return Err(DataError::DimensionMismatch {
                    record: i,
                    expected: first,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(first, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    /// Keeps only the first `n` vectors.
    pub fn truncate(&mut self, n: usize) {
        self.values.truncate(n * self.dim);
    }
}

#[derive(Clone, Copy, Default)]
#[repr(C, align(64))]
struct Block([f32; LANES]);

/// Zero-padded rows stored in 64-byte aligned blocks.
#[derive(Clone, Default)]
struct AlignedRows {
    count: usize,
    dim: usize,
    padded_dim: usize,
    blocks: Vec<Block>,
}

impl AlignedRows {
    fn zeroed(count: usize, dim: usize) -> Self {
        let padded_dim = padded_dim(dim);
        Self {
            count,
            dim,
            padded_dim,
            blocks: vec![Block::default(); count * padded_dim / LANES],
        }
    }

    fn as_slice(&self) -> &[f32] {
        // SAFETY: `Block` is `repr(C)` over `[f32; LANES]` and its size equals its alignment (64),
        // so a `[Block]` is a dense `[f32]` of `len * LANES` elements.
        unsafe { std::slice::from_raw_parts(self.blocks.as_ptr().cast::<f32>(), self.blocks.len() * LANES) }
    }

    fn as_mut_slice(&mut self) -> &mut [f32] {
        // SAFETY: see `as_slice`.
        unsafe {
            std::slice::from_raw_parts_mut(self.blocks.as_mut_ptr().cast::<f32>(), self.blocks.len() * LANES)
        }
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.as_slice()[i * self.padded_dim..(i + 1) * self.padded_dim]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let p = self.padded_dim;
        &mut self.as_mut_slice()[i * p..(i + 1) * p]
    }

    fn fill(raw: &RawVectors, normalize: bool) -> Result<Self, DataError> {
        if raw.is_empty() {
            return Err(DataError::Empty);
        }
        let mut rows = Self::zeroed(raw.len(), raw.dim());
        for (i, src) in raw.rows().enumerate() {
            let dst = &mut rows.row_mut(i)[..src.len()];
            dst.copy_from_slice(src);
            if normalize {
                normalize_in_place(dst).map_err(|_| DataError::ZeroVector { index: i })?;
            }
        }
        Ok(rows)
    }
}

impl fmt::Debug for AlignedRows {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AlignedRows")
            .field("count", &self.count)
            .field("dim", &self.dim)
            .field("padded_dim", &self.padded_dim)
            .finish()
    }
}

impl PartialEq for AlignedRows {
    fn eq(&self, other: &Self) -> bool {
        self.count == other.count
            && self.dim == other.dim
            && self.as_slice().iter().map(|v| v.to_bits()).eq(other.as_slice().iter().map(|v| v.to_bits()))
    }
}

/// Scales `v` to unit L2 norm. Vectors already within 1e-6 of unit norm are
/// left untouched, which makes normalization idempotent.
fn normalize_in_place(v: &mut [f32]) -> Result<(), ()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(());
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return Ok(());
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

/// Immutable, padded, contiguous base vectors tagged with a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    rows: AlignedRows,
    metric: Metric,
}

impl VectorDataset {
    /// Pads (and for [`Metric::Angular`], normalizes) `raw` into aligned storage.
    pub fn build(raw: &RawVectors, metric: Metric) -> Result<Self, DataError> {
        let rows = AlignedRows::fill(raw, metric == Metric::Angular)?;
        Ok(Self { rows, metric })
    }

    /// Reassembles a dataset from already padded values, e.g. when loading an index.
    pub(crate) fn from_padded(count: usize, dim: usize, metric: Metric, padded: &[f32]) -> Self {
        let mut rows = AlignedRows::zeroed(count, dim);
        rows.as_mut_slice().copy_from_slice(padded);
        Self { rows, metric }
    }

    pub fn len(&self) -> usize {
        self.rows.count
    }

    pub fn is_empty(&self) -> bool {
        self.rows.count == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.dim
    }

    pub fn padded_dim(&self) -> usize {
        self.rows.padded_dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Padded row `i`.
    #[inline]
    pub fn vector(&self, i: usize) -> &[f32] {
        self.rows.row(i)
    }

    /// The whole padded buffer, `len() * padded_dim()` scalars.
    pub fn as_flat(&self) -> &[f32] {
        self.rows.as_slice()
    }

    /// Unpadded copy of all vectors (post-normalization for angular).
    pub fn to_raw(&self) -> RawVectors {
        let mut values = Vec::with_capacity(self.len() * self.dim());
        for i in 0..self.len() {
            values.extend_from_slice(&self.vector(i)[..self.dim()]);
        }
        RawVectors { dim: self.dim(), values }
    }

    /// Pads a single query to this dataset's layout, normalizing under angular.
    pub fn prepare_query(&self, q: &[f32]) -> Result<Vec<f32>, DataError> {
        if q.len() != self.dim() {
            return Err(DataError::DimensionMismatch {
                record: 0,
                expected: self.dim(),
                found: q.len(),
            });
        }
        let mut out = vec![0.0; self.padded_dim()];
        out[..q.len()].copy_from_slice(q);
        if self.metric == Metric::Angular {
            normalize_in_place(&mut out[..q.len()]).map_err(|_| DataError::ZeroVector { index: 0 })?;
        }
        Ok(out)
    }

    /// Returns a dataset whose row `j` is this dataset's row `order[j]`.
    pub(crate) fn gather(&self, order: &[u32]) -> Self {
        let mut rows = AlignedRows::zeroed(self.len(), self.dim());
        for (j, &src) in order.iter().enumerate() {
            rows.row_mut(j).copy_from_slice(self.vector(src as usize));
        }
        Self { rows, metric: self.metric }
    }
}

/// Queries padded (and normalized when angular) to match a [`VectorDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    rows: AlignedRows,
}

impl QuerySet {
    pub fn build(raw: &RawVectors, base: &VectorDataset) -> Result<Self, DataError> {
        if raw.dim() != base.dim() {
            return Err(DataError::DimensionMismatch {
                record: 0,
                expected: base.dim(),
                found: raw.dim(),
            });
        }
        let rows = AlignedRows::fill(raw, base.metric() == Metric::Angular)?;
        Ok(Self { rows })
    }

    /// Builds a query set from rows of an existing dataset (already padded/normalized).
    pub fn from_dataset_rows(base: &VectorDataset, ids: &[u32]) -> Self {
        let g = base.gather(ids);
        Self { rows: g.rows }
    }

    pub fn len(&self) -> usize {
        self.rows.count
    }

    pub fn is_empty(&self) -> bool {
        self.rows.count == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.dim
    }

    pub fn padded_dim(&self) -> usize {
        self.rows.padded_dim
    }

    #[inline]
    pub fn query(&self, i: usize) -> &[f32] {
        self.rows.row(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.len()).map(move |i| self.query(i))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Walks `int32 d` + `d * elem_size` byte records, handing each payload to `sink`.
fn parse_records(
    bytes: &[u8],
    elem_size: usize,
    mut sink: impl FnMut(usize, &[u8]) -> Result<(), DataError>,
) -> Result<usize, DataError> {
    if bytes.is_empty() {
        return Err(DataError::Empty);
    }
    let mut offset = 0;
    let mut dim = None;
    let mut record = 0;
    while offset < bytes.len() {
        let header = bytes.get(offset..offset + 4).ok_or(DataError::Truncated {
            offset,
            needed: 4,
            available: bytes.len() - offset,
        })?;
        let d = i32::from_le_bytes(header.try_into().expect("4-byte slice"));
        if d <= 0 {
            return Err(DataError::InvalidDimension { offset, value: d });
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(DataError::DimensionMismatch {
                    record,
                    expected,
                    found: d,
                })
            }
            Some(_) => {}
        }
        let start = offset + 4;
        let needed = d * elem_size;
        let payload = bytes.get(start..start + needed).ok_or(DataError::Truncated {
            offset,
            needed: needed + 4,
            available: bytes.len() - offset,
        })?;
        sink(d, payload)?;
        offset = start + needed;
        record += 1;
    }
    Ok(dim.expect("at least one record"))
}

/// Reads an `.fvecs` file: per record, `int32 d` then `d` little-endian `f32`.
pub fn load_fvecs(path: impl AsRef<Path>) -> Result<RawVectors, DataError> {
    parse_fvecs(&read_file(path.as_ref())?)
}

pub fn parse_fvecs(bytes: &[u8]) -> Result<RawVectors, DataError> {
    let mut values = Vec::new();
    let dim = parse_records(bytes, 4, |_, payload| {
        values.extend(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        Ok(())
    })?;
    RawVectors::new(dim, values)
}

/// Reads a `.bvecs` file: per record, `int32 d` then `d` unsigned bytes, widened to `f32`.
pub fn load_bvecs(path: impl AsRef<Path>) -> Result<RawVectors, DataError> {
    parse_bvecs(&read_file(path.as_ref())?)
}

pub fn parse_bvecs(bytes: &[u8]) -> Result<RawVectors, DataError> {
    let mut values = Vec::new();
    let dim = parse_records(bytes, 1, |_, payload| {
        values.extend(payload.iter().map(|&b| f32::from(b)));
        Ok(())
    })?;
    RawVectors::new(dim, values)
}

/// Reads an `.ivecs` file (ground truth / result ids): per record, `int32 d` then `d` `int32`.
pub fn load_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>, DataError> {
    parse_ivecs(&read_file(path.as_ref())?)
}

pub fn parse_ivecs(bytes: &[u8]) -> Result<Vec<Vec<u32>>, DataError> {
    let mut rows = Vec::new();
    parse_records(bytes, 4, |_, payload| {
        let record = rows.len();
        let row = payload
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes(c.try_into().unwrap());
                u32::try_from(v).map_err(|_| DataError::NegativeId { record, value: v })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
        Ok(())
    })?;
    Ok(rows)
}

pub fn encode_fvecs(raw: &RawVectors) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len() * (raw.dim() + 1) * 4);
    for row in raw.rows() {
        out.extend_from_slice(&(raw.dim() as i32).to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_fvecs(path: impl AsRef<Path>, raw: &RawVectors) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_fvecs(raw))
}

/// Writes byte vectors. Every row must have the same length.
pub fn save_bvecs(path: impl AsRef<Path>, rows: &[Vec<u8>]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for row in rows {
        out.extend_from_slice(&(row.len() as i32).to_le_bytes());
        out.extend_from_slice(row);
    }
    write_file(path.as_ref(), &out)
}

pub fn encode_ivecs(rows: &[Vec<u32>]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        out.extend_from_slice(&(row.len() as i32).to_le_bytes());
        for &v in row {
            out.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    out
}

pub fn save_ivecs(path: impl AsRef<Path>, rows: &[Vec<u32>]) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_ivecs(rows))
}

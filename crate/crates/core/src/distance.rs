//! Distance kernels: scalar 1-to-1 and batched 1-to-B, plus cache-aware batch sizing.
//!
//! Both kernels accumulate into [`LANES`] independent partial sums, one per
//! lane of a 64-byte segment, and reduce them with the same fixed pairwise
//! tree. The batched kernel only interleaves *which* vector a segment belongs
//! to, never the per-lane operation order, so `dist_batch` is bit-identical to
//! mapping `dist_one`.

use thiserror::Error;

use crate::dataset::{Metric, VectorDataset, LANES};

/// Default per-worker L1 data cache size, bytes.
pub const DEFAULT_L1D_BYTES: usize = 64 * 1024;
/// Default share of L1d given to in-flight batch vectors.
pub const DEFAULT_CACHE_ALPHA: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistanceError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("id {id} out of range for {count} vectors")]
    InvalidId { id: u32, count: usize },
    #[error("output buffer holds {out} values but {ids} ids were given")]
    OutputLength { out: usize, ids: usize },
}

#[inline(always)]
fn fmadd(a: f32, b: f32, acc: f32) -> f32 {
    #[cfg(any(target_feature = "fma", target_arch = "aarch64"))]
    {
        a.mul_add(b, acc)
    }
    #[cfg(not(any(target_feature = "fma", target_arch = "aarch64")))]
    {
        a * b + acc
    }
}

#[inline(always)]
fn reduce(acc: &[f32; LANES]) -> f32 {
    let mut half = [0.0f32; 8];
    for i in 0..8 {
        half[i] = acc[i] + acc[i + 8];
    }
    let q = [half[0] + half[4], half[1] + half[5], half[2] + half[6], half[3] + half[7]];
    (q[0] + q[2]) + (q[1] + q[3])
}

#[inline(always)]
fn l2_segment(acc: &mut [f32; LANES], q: &[f32], x: &[f32]) {
    for i in 0..LANES {
        let d = q[i] - x[i];
        acc[i] = fmadd(d, d, acc[i]);
    }
}

#[inline(always)]
fn ip_segment(acc: &mut [f32; LANES], q: &[f32], x: &[f32]) {
    for i in 0..LANES {
        acc[i] = fmadd(q[i], x[i], acc[i]);
    }
}

/// Applies `segment` over equal-length slices, zero-extending a ragged tail.
#[inline(always)]
fn accumulate(q: &[f32], x: &[f32], segment: impl Fn(&mut [f32; LANES], &[f32], &[f32])) -> [f32; LANES] {
    let mut acc = [0.0f32; LANES];
    let full = q.len() / LANES * LANES;
    for (qc, xc) in q[..full].chunks_exact(LANES).zip(x[..full].chunks_exact(LANES)) {
        segment(&mut acc, qc, xc);
    }
    if full < q.len() {
        let mut qt = [0.0f32; LANES];
        let mut xt = [0.0f32; LANES];
        qt[..q.len() - full].copy_from_slice(&q[full..]);
        xt[..x.len() - full].copy_from_slice(&x[full..]);
        segment(&mut acc, &qt, &xt);
    }
    acc
}

#[inline]
pub(crate) fn l2_sq(q: &[f32], x: &[f32]) -> f32 {
    debug_assert_eq!(q.len(), x.len());
    reduce(&accumulate(q, x, l2_segment))
}

#[inline]
pub(crate) fn dot(q: &[f32], x: &[f32]) -> f32 {
    debug_assert_eq!(q.len(), x.len());
    reduce(&accumulate(q, x, ip_segment))
}

/// Unchecked distance; callers guarantee equal lengths.
#[inline]
pub(crate) fn distance(q: &[f32], x: &[f32], metric: Metric) -> f32 {
    match metric {
        Metric::SquaredL2 | Metric::Angular => l2_sq(q, x),
        Metric::NegativeInnerProduct => -dot(q, x),
    }
}

/// Distance between two vectors of equal length under `metric`.
pub fn dist_one(q: &[f32], x: &[f32], metric: Metric) -> Result<f32, DistanceError> {
    if q.len() != x.len() {
        return Err(DistanceError::DimensionMismatch { left: q.len(), right: x.len() });
    }
    Ok(distance(q, x, metric))
}

const GROUP: usize = 4;

/// 1-to-B kernel over padded rows: the query segment is loaded once per group of
/// [`GROUP`] database vectors.
pub(crate) fn batch_padded(q: &[f32], xs: &[&[f32]], metric: Metric, out: &mut [f32]) {
    debug_assert_eq!(xs.len(), out.len());
    if !q.len().is_multiple_of(LANES) {
        for (o, x) in out.iter_mut().zip(xs) {
            *o = distance(q, x, metric);
        }
        return;
    }
    let segments = q.len() / LANES;
    let mut groups = xs.chunks_exact(GROUP);
    let mut outs = out.chunks_exact_mut(GROUP);
    for (group, dst) in (&mut groups).zip(&mut outs) {
        let mut acc = [[0.0f32; LANES]; GROUP];
        for s in 0..segments {
            let range = s * LANES..(s + 1) * LANES;
            let qc = &q[range.clone()];
            for j in 0..GROUP {
                let xc = &group[j][range.clone()];
                match metric {
                    Metric::NegativeInnerProduct => ip_segment(&mut acc[j], qc, xc),
                    _ => l2_segment(&mut acc[j], qc, xc),
                }
            }
        }
        for j in 0..GROUP {
            let r = reduce(&acc[j]);
            dst[j] = if metric == Metric::NegativeInnerProduct { -r } else { r };
        }
    }
    for (o, x) in outs.into_remainder().iter_mut().zip(groups.remainder()) {
        *o = distance(q, x, metric);
    }
}

/// Distances from `q` to the given slices, element `j` equal to `dist_one(q, xs[j])`.
pub fn dist_batch_slices(q: &[f32], xs: &[&[f32]], metric: Metric, out: &mut [f32]) -> Result<(), DistanceError> {
    if out.len() != xs.len() {
        return Err(DistanceError::OutputLength { out: out.len(), ids: xs.len() });
    }
    if let Some(x) = xs.iter().find(|x| x.len() != q.len()) {
        return Err(DistanceError::DimensionMismatch { left: q.len(), right: x.len() });
    }
    batch_padded(q, xs, metric, out);
    Ok(())
}

/// Distances from a padded query to the dataset rows named by `ids`.
pub fn dist_batch(q: &[f32], data: &VectorDataset, ids: &[u32], out: &mut [f32]) -> Result<(), DistanceError> {
    if q.len() != data.padded_dim() {
        return Err(DistanceError::DimensionMismatch { left: q.len(), right: data.padded_dim() });
    }
    if out.len() != ids.len() {
        return Err(DistanceError::OutputLength { out: out.len(), ids: ids.len() });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= data.len()) {
        return Err(DistanceError::InvalidId { id, count: data.len() });
    }
    gather_and_batch(q, data, ids, out);
    Ok(())
}

#[inline]
pub(crate) fn gather_and_batch(q: &[f32], data: &VectorDataset, ids: &[u32], out: &mut [f32]) {
    let mut rows: [&[f32]; 64] = [&[]; 64];
    for (id_chunk, out_chunk) in ids.chunks(64).zip(out.chunks_mut(64)) {
        for (slot, &id) in rows.iter_mut().zip(id_chunk) {
            *slot = data.vector(id as usize);
        }
        batch_padded(q, &rows[..id_chunk.len()], data.metric(), out_chunk);
    }
}

/// `floor(alpha * l1d_bytes / (dim * elem_bytes))`, never below 1.
///
/// The upper clamp to the graph out-degree is applied by [`BatchSpec::effective_width`].
pub fn compute_batch_size(l1d_bytes: usize, dim: usize, elem_bytes: usize, alpha: f64) -> usize {
    let denom = (dim.max(1) * elem_bytes.max(1)) as f64;
    let b = (alpha * l1d_bytes as f64 / denom).floor();
    if b.is_finite() && b >= 1.0 {
        b as usize
    } else {
        1
    }
}

/// Batch width for neighbor distance evaluation during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub width: usize,
}

impl BatchSpec {
    /// Width 1: the plain scalar path.
    pub const SCALAR: BatchSpec = BatchSpec { width: 1 };

    pub fn fixed(width: usize) -> Self {
        Self { width: width.max(1) }
    }

    pub fn from_cache(l1d_bytes: usize, dim: usize, elem_bytes: usize, alpha: f64) -> Self {
        Self { width: compute_batch_size(l1d_bytes, dim, elem_bytes, alpha) }
    }

    /// Default sizing for `f32` rows of `padded_dim` scalars.
    pub fn for_dim(padded_dim: usize) -> Self {
        Self::from_cache(DEFAULT_L1D_BYTES, padded_dim, 4, DEFAULT_CACHE_ALPHA)
    }

    /// Width clamped to `[1, out_degree]`.
    pub fn effective_width(&self, out_degree: usize) -> usize {
        self.width.clamp(1, out_degree.max(1))
    }
}

/// Software prefetch hint. `Off` and `On` produce identical results; only
/// cache behavior differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Prefetch {
    #[default]
    Off,
    On,
}

impl Prefetch {
    #[inline(always)]
    pub fn hint<T>(self, data: &[T]) {
        if self == Prefetch::On && !data.is_empty() {
            let bytes = std::mem::size_of_val(data);
            let base = data.as_ptr().cast::<u8>();
            let mut off = 0;
            while off < bytes {
                // SAFETY: `off < bytes` keeps the pointer inside `data`.
                prefetch_line(unsafe { base.add(off) });
                off += 64;
            }
        }
    }
}

#[inline(always)]
fn prefetch_line(ptr: *const u8) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: prefetch is a hint and never faults.
    unsafe {
        std::arch::x86_64::_mm_prefetch(ptr.cast::<i8>(), std::arch::x86_64::_MM_HINT_T0);
    }
    #[cfg(target_arch = "aarch64")]
    // SAFETY: prfm is a hint and never faults.
    unsafe {
        std::arch::asm!("prfm pldl1keep, [{0}]", in(reg) ptr, options(nostack, readonly, preserves_flags));
    }
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    let _ = ptr;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RawVectors;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(q: &[f32], x: &[f32], metric: Metric) -> f64 {
        match metric {
            Metric::NegativeInnerProduct => -q.iter().zip(x).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>(),
            _ => q.iter().zip(x).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum(),
        }
    }

    #[test]
    fn small_examples() {
        assert_eq!(dist_one(&[0.0, 0.0], &[3.0, 4.0], Metric::SquaredL2).unwrap(), 25.0);
        assert_eq!(dist_one(&[1.0, 2.0], &[3.0, 4.0], Metric::NegativeInnerProduct).unwrap(), -11.0);
        assert_eq!(
            dist_one(&[1.0], &[1.0, 2.0], Metric::SquaredL2),
            Err(DistanceError::DimensionMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn matches_double_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for metric in [Metric::SquaredL2, Metric::NegativeInnerProduct] {
                let got = f64::from(dist_one(&q, &x, metric).unwrap());
                let want = oracle(&q, &x, metric);
                assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn padded_tail_does_not_change_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f32>> = (0..2).map(|_| (0..100).map(|_| rng.gen()).collect()).collect();
        let ds = VectorDataset::build(&RawVectors::from_rows(&rows).unwrap(), Metric::SquaredL2).unwrap();
        let padded = dist_one(ds.vector(0), ds.vector(1), Metric::SquaredL2).unwrap();
        let unpadded = dist_one(&rows[0], &rows[1], Metric::SquaredL2).unwrap();
        assert_eq!(padded.to_bits(), unpadded.to_bits());
    }

    #[test]
    fn batch_of_one_and_self_lane() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f32>> = (0..9).map(|_| (0..40).map(|_| rng.gen()).collect()).collect();
        let ds = VectorDataset::build(&RawVectors::from_rows(&rows).unwrap(), Metric::SquaredL2).unwrap();
        let q = ds.vector(4).to_vec();
        let mut out = [0.0];
        dist_batch(&q, &ds, &[2], &mut out).unwrap();
        assert_eq!(out[0].to_bits(), dist_one(&q, ds.vector(2), Metric::SquaredL2).unwrap().to_bits());

        let ids: Vec<u32> = (0..9).collect();
        let mut out = vec![0.0; 9];
        dist_batch(&q, &ds, &ids, &mut out).unwrap();
        assert_eq!(out[4], 0.0);

        assert_eq!(
            dist_batch(&q, &ds, &[9], &mut [0.0]),
            Err(DistanceError::InvalidId { id: 9, count: 9 })
        );
    }

    #[test]
    fn batch_size_examples() {
        assert_eq!(compute_batch_size(65536, 128, 4, 0.5), 64);
        assert_eq!(compute_batch_size(65536, 10_000, 4, 0.5), 1);
        assert_eq!(compute_batch_size(65536, 96, 4, 0.5), 85);
        assert_eq!(BatchSpec::from_cache(65536, 96, 4, 0.5).effective_width(32), 32);
        assert_eq!(BatchSpec::from_cache(65536, 96, 4, 0.5).effective_width(100), 85);
        assert_eq!(BatchSpec::for_dim(128).width, 64);
    }

    #[test]
    fn prefetch_is_harmless() {
        let v = vec![1.0f32; 1000];
        Prefetch::On.hint(&v);
        Prefetch::Off.hint(&v);
        Prefetch::On.hint::<u32>(&[]);
    }

    proptest! {
        #[test]
        fn batch_equals_scalar_loop(
            seed in any::<u64>(),
            dim in 1usize..80,
            count in 1usize..40,
            metric_code in 0u32..3,
        ) {
            let metric = Metric::from_code(metric_code).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let ds = VectorDataset::build(&RawVectors::from_rows(&rows).unwrap(), metric).unwrap();
            let q = ds.prepare_query(&rows[0].iter().map(|v| v + 0.5).collect::<Vec<_>>()).unwrap();
            let ids: Vec<u32> = (0..count as u32).rev().collect();
            let mut out = vec![0.0; count];
            dist_batch(&q, &ds, &ids, &mut out).unwrap();
            for (o, &id) in out.iter().zip(&ids) {
                let one = dist_one(&q, ds.vector(id as usize), metric).unwrap();
                prop_assert_eq!(o.to_bits(), one.to_bits());
            }
        }

        #[test]
        fn l2_symmetry_and_identity(seed in any::<u64>(), dim in 1usize..70) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f32> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            prop_assert_eq!(dist_one(&a, &b, Metric::SquaredL2).unwrap(), dist_one(&b, &a, Metric::SquaredL2).unwrap());
            prop_assert_eq!(dist_one(&a, &a, Metric::SquaredL2).unwrap(), 0.0);
        }

        #[test]
        fn batch_size_monotonicity(
            l1d in 1024usize..1 << 20,
            dim in 1usize..4096,
            elem in 1usize..9,
            alpha in 0.01f64..=1.0,
            bump in 1usize..512,
            alpha_bump in 0.0f64..0.5,
        ) {
            let b = compute_batch_size(l1d, dim, elem, alpha);
            prop_assert!(b >= 1);
            prop_assert!(compute_batch_size(l1d, dim + bump, elem, alpha) <= b);
            prop_assert!(compute_batch_size(l1d + bump, dim, elem, alpha) >= b);
            prop_assert!(compute_batch_size(l1d, dim, elem, (alpha + alpha_bump).min(1.0)) >= b);
            prop_assert!(compute_batch_size(l1d, dim, elem + 1, alpha) <= b);
        }
    }
}

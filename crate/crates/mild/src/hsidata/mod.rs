//! Core data model for multitemporal hyperspectral scenes.
//!
//! A scene is a stack of `T` coregistered images, each `H x W` pixels with `L`
//! spectral bands. Under the linear mixing model every pixel spectrum is a
//! convex combination of `P` endmember spectra, with weights (abundances)
//! constrained to the probability simplex. This module holds the three value
//! types that circulate through the whole crate — [`SequenceCube`],
//! [`AbundanceStack`], [`EndmemberSet`] — plus constraint validation, exact
//! linear-mixing reconstruction, Euclidean simplex projection, and the binary
//! file formats.
//!
//! Pixels are stored flattened (`n = h * width + w`, row-major). All paper
//! operations are per-pixel, so spatial structure only matters again when
//! abundance maps are exported as images.

mod io;

pub use io::{
    read_abundance, read_cube, read_endmember_csv, write_abundance, write_cube,
    write_endmember_csv,
};

use thiserror::Error;

/// Tolerance for the nonnegativity and sum-to-one abundance constraints.
pub const EPSILON_SIMPLEX: f64 = 1e-6;

/// Errors produced by the data model and its file formats.
#[derive(Debug, Error)]
pub enum HsiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated payload: header declares {declared} values, {available} available")]
    Truncated { declared: u64, available: u64 },
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// SequenceCube
// ---------------------------------------------------------------------------

/// An observed multitemporal image stack: `T x H x W x L` reflectance values.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCube {
    t_count: usize,
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
}

impl SequenceCube {
    pub fn new(
        t_count: usize,
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f64>,
    ) -> Result<Self, HsiError> {
        if t_count < 1 || height < 1 || width < 1 || bands < 1 {
            return Err(HsiError::InvalidDims(format!(
                "cube dims must be >= 1, got T={t_count} H={height} W={width} L={bands}"
            )));
        }
        let expected = t_count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| HsiError::DimOverflow("cube element count overflows usize".into()))?;
        if values.len() != expected {
            return Err(HsiError::DimensionMismatch(format!(
                "cube expects {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(HsiError::NonFinite(format!("cube value at flat index {pos}")));
        }
        Ok(SequenceCube {
            t_count,
            height,
            width,
            bands,
            values,
        })
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    /// Number of pixels per frame, `N = H * W`.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Spectrum of pixel `n` (flattened index) at time `t`.
    #[inline]
    pub fn pixel(&self, t: usize, n: usize) -> &[f64] {
        let start = (t * self.pixel_count() + n) * self.bands;
        &self.values[start..start + self.bands]
    }

    /// All pixel spectra of frame `t` as one contiguous slice (`N * L`).
    #[inline]
    pub fn frame(&self, t: usize) -> &[f64] {
        let frame_len = self.pixel_count() * self.bands;
        &self.values[t * frame_len..(t + 1) * frame_len]
    }

    /// Copy with every value rounded to the nearest `f32`, i.e. exactly what
    /// a file round-trip would produce.
    pub fn quantized(&self) -> SequenceCube {
        SequenceCube {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// AbundanceStack
// ---------------------------------------------------------------------------

/// Per-time per-pixel material fractions: `T x N x P`, simplex-constrained.
///
/// The same type carries true abundances, estimated abundances, and the
/// per-time encoder outputs (pseudo-abundances). Constraint conformance is
/// checked by [`validate_abundance`], not by construction, so that violating
/// stacks can be represented and reported.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceStack {
    t_count: usize,
    pixel_count: usize,
    endmember_count: usize,
    values: Vec<f64>,
}

impl AbundanceStack {
    pub fn new(
        t_count: usize,
        pixel_count: usize,
        endmember_count: usize,
        values: Vec<f64>,
    ) -> Result<Self, HsiError> {
        if t_count < 1 || pixel_count < 1 || endmember_count < 1 {
            return Err(HsiError::InvalidDims(format!(
                "abundance dims must be >= 1, got T={t_count} N={pixel_count} P={endmember_count}"
            )));
        }
        let expected = t_count
            .checked_mul(pixel_count)
            .and_then(|v| v.checked_mul(endmember_count))
            .ok_or_else(|| HsiError::DimOverflow("abundance element count overflows usize".into()))?;
        if values.len() != expected {
            return Err(HsiError::DimensionMismatch(format!(
                "abundance stack expects {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(HsiError::NonFinite(format!(
                "abundance value at flat index {pos}"
            )));
        }
        Ok(AbundanceStack {
            t_count,
            pixel_count,
            endmember_count,
            values,
        })
    }

    /// All-zero stack (useful as a mutable scratch target).
    pub fn zeros(t_count: usize, pixel_count: usize, endmember_count: usize) -> Self {
        AbundanceStack {
            t_count,
            pixel_count,
            endmember_count,
            values: vec![0.0; t_count * pixel_count * endmember_count],
        }
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }
    pub fn endmember_count(&self) -> usize {
        self.endmember_count
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Abundance vector of pixel `n` at time `t`.
    #[inline]
    pub fn row(&self, t: usize, n: usize) -> &[f64] {
        let start = (t * self.pixel_count + n) * self.endmember_count;
        &self.values[start..start + self.endmember_count]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize, n: usize) -> &mut [f64] {
        let start = (t * self.pixel_count + n) * self.endmember_count;
        &mut self.values[start..start + self.endmember_count]
    }

    /// All rows of frame `t` as one contiguous slice (`N * P`).
    #[inline]
    pub fn frame(&self, t: usize) -> &[f64] {
        let frame_len = self.pixel_count * self.endmember_count;
        &self.values[t * frame_len..(t + 1) * frame_len]
    }

    /// Copy with every value rounded to the nearest `f32`.
    pub fn quantized(&self) -> AbundanceStack {
        AbundanceStack {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// EndmemberSet
// ---------------------------------------------------------------------------

/// Reference endmembers `E` plus per-time endmembers `E_t = E + dE_t`.
///
/// Both are `P x L` row-major matrices: one row per material signature.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet {
    endmember_count: usize,
    bands: usize,
    reference: Vec<f64>,
    per_time: Vec<Vec<f64>>,
}

impl EndmemberSet {
    pub fn new(
        endmember_count: usize,
        bands: usize,
        reference: Vec<f64>,
        per_time: Vec<Vec<f64>>,
    ) -> Result<Self, HsiError> {
        if endmember_count < 2 {
            return Err(HsiError::InvalidDims(format!(
                "endmember count must be >= 2, got {endmember_count}"
            )));
        }
        let expected = endmember_count * bands;
        if reference.len() != expected {
            return Err(HsiError::DimensionMismatch(format!(
                "reference endmembers expect {expected} values, got {}",
                reference.len()
            )));
        }
        for (t, m) in per_time.iter().enumerate() {
            if m.len() != expected {
                return Err(HsiError::DimensionMismatch(format!(
                    "per-time endmembers at t={t} expect {expected} values, got {}",
                    m.len()
                )));
            }
        }
        for v in reference.iter().chain(per_time.iter().flatten()) {
            if !v.is_finite() {
                return Err(HsiError::NonFinite("endmember value".into()));
            }
        }
        Ok(EndmemberSet {
            endmember_count,
            bands,
            reference,
            per_time,
        })
    }

    /// A set whose per-time endmembers all equal the reference (`dE_t = 0`).
    pub fn constant(
        endmember_count: usize,
        bands: usize,
        reference: Vec<f64>,
        t_count: usize,
    ) -> Result<Self, HsiError> {
        let per_time = vec![reference.clone(); t_count];
        EndmemberSet::new(endmember_count, bands, reference, per_time)
    }

    pub fn endmember_count(&self) -> usize {
        self.endmember_count
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn t_count(&self) -> usize {
        self.per_time.len()
    }
    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    #[inline]
    pub fn reference_row(&self, p: usize) -> &[f64] {
        &self.reference[p * self.bands..(p + 1) * self.bands]
    }

    /// Per-time endmember matrix `E_t`, row-major `P x L`.
    #[inline]
    pub fn at_time(&self, t: usize) -> &[f64] {
        &self.per_time[t]
    }

    #[inline]
    pub fn row_at_time(&self, t: usize, p: usize) -> &[f64] {
        &self.per_time[t][p * self.bands..(p + 1) * self.bands]
    }

    /// Perturbation `dE_t = E_t - E` as a fresh matrix.
    pub fn perturbation(&self, t: usize) -> Vec<f64> {
        self.per_time[t]
            .iter()
            .zip(self.reference.iter())
            .map(|(et, e)| et - e)
            .collect()
    }

    /// Frobenius norm of the perturbation at time `t`.
    pub fn perturbation_norm(&self, t: usize) -> f64 {
        self.perturbation(t).iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Which simplex constraint a row violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Negativity,
    Sum,
}

/// One constraint violation: where, which constraint, by how much.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub t: usize,
    pub pixel: usize,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

/// Result of checking an abundance stack against the simplex constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Report every row violating nonnegativity beyond [`EPSILON_SIMPLEX`] or
/// whose sum deviates from one by more than [`EPSILON_SIMPLEX`].
///
/// Validation never fails; it reports.
pub fn validate_abundance(a: &AbundanceStack) -> ValidationReport {
    let mut violations = Vec::new();
    for t in 0..a.t_count() {
        for n in 0..a.pixel_count() {
            let row = a.row(t, n);
            let worst_neg = row.iter().cloned().fold(0.0_f64, f64::min);
            if worst_neg < -EPSILON_SIMPLEX {
                violations.push(Violation {
                    t,
                    pixel: n,
                    kind: ViolationKind::Negativity,
                    magnitude: -worst_neg,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > EPSILON_SIMPLEX {
                violations.push(Violation {
                    t,
                    pixel: n,
                    kind: ViolationKind::Sum,
                    magnitude: (sum - 1.0).abs(),
                });
            }
        }
    }
    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

// ---------------------------------------------------------------------------
// Linear mixing reconstruction
// ---------------------------------------------------------------------------

/// Noise-free linear mixing: `output[t, n, :] = a[t, n, :] * E_t`.
///
/// `height * width` must equal the stack's pixel count; the spatial shape is
/// only needed to label the output cube.
pub fn lmm_reconstruct(
    a: &AbundanceStack,
    e: &EndmemberSet,
    height: usize,
    width: usize,
) -> Result<SequenceCube, HsiError> {
    if e.t_count() != a.t_count() {
        return Err(HsiError::DimensionMismatch(format!(
            "abundance T={} vs endmember T={}",
            a.t_count(),
            e.t_count()
        )));
    }
    if e.endmember_count() != a.endmember_count() {
        return Err(HsiError::DimensionMismatch(format!(
            "abundance P={} vs endmember P={}",
            a.endmember_count(),
            e.endmember_count()
        )));
    }
    if height * width != a.pixel_count() {
        return Err(HsiError::DimensionMismatch(format!(
            "height*width = {} but stack has {} pixels",
            height * width,
            a.pixel_count()
        )));
    }
    let (t_count, n_count, _p_count, l_count) =
        (a.t_count(), a.pixel_count(), a.endmember_count(), e.bands());
    let mut values = vec![0.0; t_count * n_count * l_count];
    for t in 0..t_count {
        let et = e.at_time(t);
        for n in 0..n_count {
            let row = a.row(t, n);
            let out = &mut values[(t * n_count + n) * l_count..(t * n_count + n + 1) * l_count];
            for (p, &ap) in row.iter().enumerate() {
                let spectrum = &et[p * l_count..(p + 1) * l_count];
                for (o, &s) in out.iter_mut().zip(spectrum.iter()) {
                    *o += ap * s;
                }
            }
        }
    }
    SequenceCube::new(t_count, height, width, l_count, values)
}

// ---------------------------------------------------------------------------
// Simplex projection
// ---------------------------------------------------------------------------

/// Left-to-right floating-point sum in index order.
#[inline]
fn index_order_sum(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x;
    }
    s
}

/// Rewrite the last positive entry of a nonnegative vector as one minus the
/// rest so the index-order floating-point sum is exactly `1.0`, stepping one
/// support position inward whenever that remainder is not positive. Vectors
/// in this canonical form are bitwise fixed points of [`simplex_project`].
pub(crate) fn canonicalize_unit_sum(x: &mut [f64]) {
    let mut support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    while let Some(&last) = support.last() {
        let mut rest = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            if i != last {
                rest += xi;
            }
        }
        let c = 1.0 - rest;
        if c > 0.0 {
            x[last] = c;
            break;
        }
        x[last] = 0.0;
        support.pop();
    }
}

/// Euclidean projection onto the probability simplex (sorted-threshold
/// algorithm).
///
/// The output is canonicalized so that its index-order floating-point sum is
/// exactly `1.0`, which makes the projection bitwise idempotent: vectors
/// already in canonical form are returned unchanged.
pub fn simplex_project(v: &[f64]) -> Result<Vec<f64>, HsiError> {
    if v.is_empty() {
        return Err(HsiError::InvalidDims("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(HsiError::NonFinite("simplex projection input".into()));
    }
    if v.iter().all(|&x| x >= 0.0) && index_order_sum(v) == 1.0 {
        return Ok(v.to_vec());
    }

    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values compare"));
    let mut prefix = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in sorted.iter().enumerate() {
        prefix += uj;
        let candidate = (prefix - 1.0) / (j as f64 + 1.0);
        if uj - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut x: Vec<f64> = v.iter().map(|&vi| (vi - theta).max(0.0)).collect();
    canonicalize_unit_sum(&mut x);
    Ok(x)
}

// ---------------------------------------------------------------------------
// Small spectral utilities shared across modules
// ---------------------------------------------------------------------------

/// Spectral angle between two signatures, in radians within `[0, pi]`.
///
/// Zero-norm inputs are treated as orthogonal (`pi/2`).
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return std::f64::consts::FRAC_PI_2;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn validate_accepts_exact_simplex_rows() {
        let a = AbundanceStack::new(1, 2, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let report = validate_abundance(&a);
        assert!(report.ok);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn validate_reports_negativity_with_magnitude() {
        let a = AbundanceStack::new(1, 1, 3, vec![0.6, 0.6, -0.2]).unwrap();
        let report = validate_abundance(&a);
        assert!(!report.ok);
        let neg: Vec<_> = report
            .violations
            .iter()
            .filter(|v| v.kind == ViolationKind::Negativity)
            .collect();
        assert_eq!(neg.len(), 1);
        assert!((neg[0].magnitude - 0.2).abs() < 1e-12);
        // the row sums to 1.0, so no sum violation
        assert_eq!(report.violations.len(), 1);
    }

    #[test]
    fn validate_reports_sum_violation() {
        let a = AbundanceStack::new(1, 1, 2, vec![0.7, 0.7]).unwrap();
        let report = validate_abundance(&a);
        assert!(!report.ok);
        assert_eq!(report.violations[0].kind, ViolationKind::Sum);
        assert!((report.violations[0].magnitude - 0.4).abs() < 1e-12);
    }

    #[test]
    fn lmm_one_hot_selects_endmember_row() {
        let e = EndmemberSet::constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 1).unwrap();
        let a = AbundanceStack::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let cube = lmm_reconstruct(&a, &e, 1, 1).unwrap();
        assert_eq!(cube.pixel(0, 0), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn lmm_uniform_row_averages_endmembers() {
        let e = EndmemberSet::constant(2, 3, vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0], 1).unwrap();
        let a = AbundanceStack::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let cube = lmm_reconstruct(&a, &e, 1, 1).unwrap();
        assert_eq!(cube.pixel(0, 0), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn lmm_identity_endmembers_reproduce_abundance() {
        let e = EndmemberSet::constant(2, 2, vec![1.0, 0.0, 0.0, 1.0], 1).unwrap();
        let a = AbundanceStack::new(1, 1, 2, vec![0.25, 0.75]).unwrap();
        let cube = lmm_reconstruct(&a, &e, 1, 1).unwrap();
        assert_eq!(cube.pixel(0, 0), &[0.25, 0.75]);
    }

    #[test]
    fn lmm_rejects_dim_mismatch() {
        let e = EndmemberSet::constant(2, 3, vec![0.0; 6], 2).unwrap();
        let a = AbundanceStack::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert!(lmm_reconstruct(&a, &e, 1, 1).is_err());
    }

    #[test]
    fn lmm_output_within_convex_hull_of_endmembers() {
        let stream = Stream::new(31);
        let p = 3;
        let l = 5;
        let e_vals: Vec<f64> = (0..p * l).map(|i| stream.f64_at(i as u64)).collect();
        let e = EndmemberSet::constant(p, l, e_vals.clone(), 1).unwrap();
        let mut rows = Vec::new();
        for n in 0..40_u64 {
            let raw: Vec<f64> = (0..p).map(|j| stream.f64_at(1000 + n * 7 + j as u64)).collect();
            rows.extend(simplex_project(&raw).unwrap());
        }
        let a = AbundanceStack::new(1, 40, p, rows).unwrap();
        let cube = lmm_reconstruct(&a, &e, 4, 10).unwrap();
        for band in 0..l {
            let lo = (0..p).map(|q| e_vals[q * l + band]).fold(f64::INFINITY, f64::min);
            let hi = (0..p)
                .map(|q| e_vals[q * l + band])
                .fold(f64::NEG_INFINITY, f64::max);
            for n in 0..40 {
                let v = cube.pixel(0, n)[band];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn projection_keeps_simplex_points() {
        let v = [0.2, 0.3, 0.5];
        assert_eq!(simplex_project(&v).unwrap(), v.to_vec());
        let vertex = [1.0, 0.0, 0.0];
        assert_eq!(simplex_project(&vertex).unwrap(), vertex.to_vec());
    }

    #[test]
    fn projection_clamps_dominant_coordinate() {
        assert_eq!(simplex_project(&[2.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_matches_constructed_case() {
        assert_eq!(
            simplex_project(&[0.6, 0.6, -0.2]).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
    }

    /// Brute-force oracle: minimize ||x - v||^2 over a 1e-3-resolution grid of
    /// the 3-point simplex.
    fn grid_search_projection(v: &[f64; 3]) -> [f64; 3] {
        let res = 1000usize;
        let mut best = [0.0; 3];
        let mut best_d = f64::INFINITY;
        for i in 0..=res {
            for j in 0..=(res - i) {
                let k = res - i - j;
                let x = [i as f64 / res as f64, j as f64 / res as f64, k as f64 / res as f64];
                let d: f64 = x.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = x;
                }
            }
        }
        best
    }

    #[test]
    fn projection_agrees_with_grid_oracle() {
        let cases = [[0.6, 0.6, -0.2], [1.3, -0.4, 0.2], [0.1, 0.1, 0.1]];
        for v in cases {
            let exact = simplex_project(&v).unwrap();
            let grid = grid_search_projection(&v);
            for (a, b) in exact.iter().zip(grid.iter()) {
                assert!(
                    (a - b).abs() <= 1.5e-3,
                    "projection {exact:?} vs grid {grid:?} for input {v:?}"
                );
            }
        }
    }

    #[test]
    fn projection_is_bitwise_idempotent() {
        let stream = Stream::new(99);
        for case in 0..500_u64 {
            let len = 2 + (case % 7) as usize;
            let scale = if case % 3 == 0 { 10.0 } else { 1.0 };
            let v: Vec<f64> = (0..len)
                .map(|i| scale * (stream.f64_at(case * 31 + i as u64) - 0.3))
                .collect();
            let once = simplex_project(&v).unwrap();
            let twice = simplex_project(&once).unwrap();
            assert_eq!(once, twice, "not idempotent for {v:?}");
            let sum: f64 = once.iter().sum();
            assert_eq!(sum, 1.0, "canonical sum not exact for {v:?}");
            assert!(once.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn projection_rejects_non_finite() {
        assert!(simplex_project(&[f64::NAN, 0.0]).is_err());
        assert!(simplex_project(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn spectral_angle_basics() {
        assert!(spectral_angle(&[1.0, 0.0], &[1.0, 0.0]).abs() < 1e-12);
        assert!(
            (spectral_angle(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::FRAC_PI_2).abs() < 1e-12
        );
    }

    #[test]
    fn endmember_perturbation_norm_is_frobenius() {
        let reference = vec![1.0, 1.0, 1.0, 1.0];
        let shifted = vec![2.0, 2.0, 2.0, 2.0];
        let e = EndmemberSet::new(2, 2, reference, vec![shifted]).unwrap();
        assert!((e.perturbation_norm(0) - 2.0).abs() < 1e-12);
    }
}

//! Deterministic synthetic multitemporal scenes.
//!
//! Two ready-made protocols are provided. `synth1` is a six-frame scene with
//! smooth blob-shaped abundance fields, transient one-hot "mutation" discs,
//! and per-pixel spectral variability realized as a piecewise-linear band
//! scaling in `[0.85, 1.15]`. `synth2` is a fifteen-frame scene with Gaussian
//! random field abundances, per-time endmember variants drawn from a
//! perturbation pool, and persistent compact abrupt changes. Both finish with
//! additive white Gaussian noise at a configured SNR.
//!
//! Real spectral libraries are not redistributable, so reference signatures
//! are synthesized as sums of Gaussian bumps with a guaranteed pairwise
//! spectral angle; measured libraries can be imported through the CSV format
//! instead.
//!
//! Every random draw is addressed through the counter-based [`crate::rng`]
//! streams, so generation is a pure function of the spec and seed, byte-identical
//! across runs and platforms, and safe to parallelize.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsidata::{
    lmm_reconstruct, simplex_project, spectral_angle, AbundanceStack, EndmemberSet, HsiError,
    SequenceCube,
};
use crate::rng::{tag, Stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 endmembers, got {0}")]
    TooFewEndmembers(usize),
    #[error("need at least 8 bands, got {0}")]
    TooFewBands(usize),
    #[error("could not reach pairwise spectral angle {min_angle} rad in {attempts} attempts")]
    AngleSeparation { min_angle: f64, attempts: usize },
    #[error("snr_db must be positive or infinite, got {0}")]
    BadSnr(f64),
    #[error("mutation time {0} outside [1, {1}]")]
    BadMutationTime(usize, usize),
    #[error("scale range low {0} > high {1}")]
    BadScaleRange(f64, f64),
    #[error(transparent)]
    Hsi(#[from] HsiError),
}

/// Which generation protocol a [`SynthSpec`] follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Synth1,
    Synth2,
    Custom,
}

/// Full description of a synthetic scene; the JSON sidecar written next to
/// generated files is exactly this struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub preset: Preset,
    pub t_count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmember_count: usize,
    /// `None` means noise-free (infinite SNR).
    pub snr_db: Option<f64>,
    pub scale_range: (f64, f64),
    /// 1-indexed frame numbers receiving localized abundance overwrites.
    pub mutation_times: Vec<usize>,
    pub seed: u64,
}

/// The generating factors behind an observed cube.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub abundances: AbundanceStack,
    pub endmembers: EndmemberSet,
    /// Exactly `lmm_reconstruct(abundances, endmembers)`.
    pub clean_cube: SequenceCube,
}

/// Six frames, 50x50 pixels, 224 bands, 3 materials, mutations at t=2..5.
pub fn synth1_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        preset: Preset::Synth1,
        t_count: 6,
        height: 50,
        width: 50,
        bands: 224,
        endmember_count: 3,
        snr_db: Some(30.0),
        scale_range: (0.85, 1.15),
        mutation_times: vec![2, 3, 4, 5],
        seed,
    }
}

/// Fifteen frames, 50x50 pixels, 198 bands, 4 materials, abrupt changes at
/// three seed-drawn frames.
pub fn synth2_spec(seed: u64) -> SynthSpec {
    let stream = Stream::new(seed).derive(tag::MUTATION);
    let t_count = 15;
    let mut times = Vec::new();
    let mut i = 0u64;
    while times.len() < 3 {
        // abrupt changes need a frame they can differ from, so skip t = 1
        let t = 2 + stream.index_at(i, t_count - 1);
        i += 1;
        if !times.contains(&t) {
            times.push(t);
        }
    }
    times.sort_unstable();
    SynthSpec {
        preset: Preset::Synth2,
        t_count,
        height: 50,
        width: 50,
        bands: 198,
        endmember_count: 4,
        snr_db: Some(30.0),
        scale_range: (0.9, 1.1),
        mutation_times: times,
        seed,
    }
}

pub fn gen_synth1(seed: u64) -> (SequenceCube, GroundTruth) {
    generate(&synth1_spec(seed)).expect("synth1 preset is always valid")
}

pub fn gen_synth2(seed: u64) -> (SequenceCube, GroundTruth) {
    generate(&synth2_spec(seed)).expect("synth2 preset is always valid")
}

/// Generate a scene from a spec. `Synth1` and `Custom` share the blob/scaling
/// protocol; `Synth2` uses the random-field/variant-pool protocol.
pub fn generate(spec: &SynthSpec) -> Result<(SequenceCube, GroundTruth), SynthError> {
    validate_spec(spec)?;
    match spec.preset {
        Preset::Synth1 | Preset::Custom => generate_blob_scene(spec),
        Preset::Synth2 => generate_field_scene(spec),
    }
}

fn validate_spec(spec: &SynthSpec) -> Result<(), SynthError> {
    if spec.endmember_count < 2 {
        return Err(SynthError::TooFewEndmembers(spec.endmember_count));
    }
    if spec.bands < 8 {
        return Err(SynthError::TooFewBands(spec.bands));
    }
    if let Some(snr) = spec.snr_db {
        if !(snr.is_finite() && snr > 0.0) {
            return Err(SynthError::BadSnr(snr));
        }
    }
    let (lo, hi) = spec.scale_range;
    if lo > hi {
        return Err(SynthError::BadScaleRange(lo, hi));
    }
    for &t in &spec.mutation_times {
        if t < 1 || t > spec.t_count {
            return Err(SynthError::BadMutationTime(t, spec.t_count));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spectral library substitute
// ---------------------------------------------------------------------------

/// Minimum pairwise spectral angle the library generator guarantees.
pub const MIN_LIBRARY_ANGLE: f64 = 0.15;

const LIBRARY_ATTEMPTS: usize = 100;

/// Generate `p` smooth nonnegative reference spectra in `[0, 1]`, each a sum
/// of 3-6 Gaussian bumps, with pairwise spectral angle at least
/// [`MIN_LIBRARY_ANGLE`]. Returns the `p x l` row-major matrix.
pub fn gen_library_spectra(p: usize, l: usize, seed: u64) -> Result<Vec<f64>, SynthError> {
    if p < 2 {
        return Err(SynthError::TooFewEndmembers(p));
    }
    if l < 8 {
        return Err(SynthError::TooFewBands(l));
    }
    let root = Stream::new(seed).derive(tag::LIBRARY_SPECTRA);
    for attempt in 0..LIBRARY_ATTEMPTS {
        let stream = root.derive(attempt as u64);
        let mut library = Vec::with_capacity(p * l);
        for row in 0..p {
            library.extend(bump_spectrum(&stream.derive(row as u64), l));
        }
        let mut separated = true;
        'pairs: for i in 0..p {
            for j in (i + 1)..p {
                let angle = spectral_angle(&library[i * l..(i + 1) * l], &library[j * l..(j + 1) * l]);
                if angle < MIN_LIBRARY_ANGLE {
                    separated = false;
                    break 'pairs;
                }
            }
        }
        if separated {
            return Ok(library);
        }
    }
    Err(SynthError::AngleSeparation {
        min_angle: MIN_LIBRARY_ANGLE,
        attempts: LIBRARY_ATTEMPTS,
    })
}

fn bump_spectrum(stream: &Stream, l: usize) -> Vec<f64> {
    let bumps = 3 + stream.index_at(0, 4); // 3..=6
    let mut centers: Vec<f64> = Vec::with_capacity(bumps);
    let mut counter = 1u64;
    while centers.len() < bumps {
        let c = stream.range_at(counter, 0.0, l as f64);
        counter += 1;
        if centers.iter().all(|&other| (other - c).abs() >= 1.0) {
            centers.push(c);
        }
    }
    let mut spectrum = vec![0.0; l];
    for (b, &center) in centers.iter().enumerate() {
        let width = stream.range_at(100 + 2 * b as u64, l as f64 / 30.0, l as f64 / 8.0).max(2.0);
        let amplitude = stream.range_at(101 + 2 * b as u64, 0.3, 1.0);
        for (band, v) in spectrum.iter_mut().enumerate() {
            let d = (band as f64 - center) / width;
            *v += amplitude * (-0.5 * d * d).exp();
        }
    }
    let peak = stream.range_at(200, 0.55, 0.95);
    let max = spectrum.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
    for v in &mut spectrum {
        *v *= peak / max;
    }
    spectrum
}

// ---------------------------------------------------------------------------
// Additive white Gaussian noise
// ---------------------------------------------------------------------------

/// Add iid Gaussian noise scaled so that `10*log10(signal power / noise
/// power) = snr_db` over the whole cube. An infinite `snr_db` returns the
/// input unchanged.
pub fn add_awgn(cube: &SequenceCube, snr_db: f64, seed: u64) -> Result<SequenceCube, SynthError> {
    if snr_db == f64::INFINITY {
        return Ok(cube.clone());
    }
    if !(snr_db.is_finite() && snr_db > 0.0) {
        return Err(SynthError::BadSnr(snr_db));
    }
    let values = cube.values();
    let signal_power = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    let sigma = (signal_power * 10f64.powf(-snr_db / 10.0)).sqrt();
    let stream = Stream::new(seed).derive(tag::AWGN);
    let noisy: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| v + sigma * stream.normal_at(i as u64))
        .collect();
    Ok(SequenceCube::new(
        cube.t_count(),
        cube.height(),
        cube.width(),
        cube.bands(),
        noisy,
    )?)
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

/// Piecewise-linear band scaling: values at `knots` evenly spaced positions
/// (endpoints included) drawn uniformly in `[lo, hi]`, interpolated linearly
/// in the band index.
pub(crate) fn scaling_curve(stream: &Stream, bands: usize, knots: usize, lo: f64, hi: f64) -> Vec<f64> {
    debug_assert!(knots >= 2);
    let knot_values: Vec<f64> = (0..knots).map(|k| stream.range_at(k as u64, lo, hi)).collect();
    let span = (bands - 1) as f64 / (knots - 1) as f64;
    (0..bands)
        .map(|band| {
            let pos = band as f64 / span;
            let left = (pos.floor() as usize).min(knots - 2);
            let frac = pos - left as f64;
            knot_values[left] * (1.0 - frac) + knot_values[left + 1] * frac
        })
        .collect()
}

const SCALE_KNOTS: usize = 4;

/// Overwrite a compact disc of pixels with a one-hot abundance row.
fn stamp_disc(
    a: &mut AbundanceStack,
    t0: usize,
    t1: usize,
    height: usize,
    width: usize,
    center: (usize, usize),
    radius: f64,
    material: usize,
) {
    for h in 0..height {
        for w in 0..width {
            let dh = h as f64 - center.0 as f64;
            let dw = w as f64 - center.1 as f64;
            if dh * dh + dw * dw <= radius * radius {
                for t in t0..t1 {
                    let row = a.row_mut(t, h * width + w);
                    row.fill(0.0);
                    row[material] = 1.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Blob protocol (synth1 / custom)
// ---------------------------------------------------------------------------

struct Blob {
    center_h: f64,
    center_w: f64,
    drift_h: f64,
    drift_w: f64,
    width: f64,
    amplitude: f64,
}

fn generate_blob_scene(spec: &SynthSpec) -> Result<(SequenceCube, GroundTruth), SynthError> {
    let root = Stream::new(spec.seed);
    let (t_count, height, width) = (spec.t_count, spec.height, spec.width);
    let (bands, p_count) = (spec.bands, spec.endmember_count);
    let n_count = height * width;

    let reference = gen_library_spectra(p_count, bands, spec.seed)?;

    // Smooth per-material fields: baseline plus drifting Gaussian blobs.
    let field_stream = root.derive(tag::ABUNDANCE_FIELD);
    let blobs_per_field = 3;
    let blobs: Vec<Vec<Blob>> = (0..p_count)
        .map(|p| {
            let s = field_stream.derive(p as u64);
            (0..blobs_per_field)
                .map(|b| {
                    let base = 10 * b as u64;
                    Blob {
                        center_h: s.range_at(base, 0.0, height as f64),
                        center_w: s.range_at(base + 1, 0.0, width as f64),
                        drift_h: s.range_at(base + 2, -1.5, 1.5),
                        drift_w: s.range_at(base + 3, -1.5, 1.5),
                        width: s.range_at(base + 4, 0.16 * height as f64, 0.36 * height as f64),
                        amplitude: s.range_at(base + 5, 0.4, 1.0),
                    }
                })
                .collect()
        })
        .collect();

    let mut abundances = AbundanceStack::zeros(t_count, n_count, p_count);
    for t in 0..t_count {
        for h in 0..height {
            for w in 0..width {
                let mut raw = vec![0.15; p_count];
                for (p, field) in blobs.iter().enumerate() {
                    for blob in field {
                        let dh = h as f64 - (blob.center_h + blob.drift_h * t as f64);
                        let dw = w as f64 - (blob.center_w + blob.drift_w * t as f64);
                        let d2 = (dh * dh + dw * dw) / (2.0 * blob.width * blob.width);
                        raw[p] += blob.amplitude * (-d2).exp();
                    }
                }
                let projected = simplex_project(&raw)?;
                abundances.row_mut(t, h * width + w).copy_from_slice(&projected);
            }
        }
    }

    // Transient one-hot mutation discs.
    let mutation_stream = root.derive(tag::MUTATION);
    for (k, &time) in spec.mutation_times.iter().enumerate() {
        let s = mutation_stream.derive(k as u64);
        let center = (s.index_at(0, height), s.index_at(1, width));
        let radius = s.range_at(2, 3.0, 6.0);
        let material = s.index_at(3, p_count);
        let t = time - 1;
        stamp_disc(&mut abundances, t, t + 1, height, width, center, radius, material);
    }

    // Ground truth uses the reference endmembers at every time; per-pixel
    // spectral variability lives in the observation residual.
    let endmembers = EndmemberSet::constant(p_count, bands, reference, t_count)?;
    let clean_cube = lmm_reconstruct(&abundances, &endmembers, height, width)?;

    let (lo, hi) = spec.scale_range;
    let scale_stream = root.derive(tag::SCALING_CURVE);
    let mut varied = Vec::with_capacity(clean_cube.values().len());
    for t in 0..t_count {
        for n in 0..n_count {
            let curve = scaling_curve(
                &scale_stream.derive(t as u64).derive(n as u64),
                bands,
                SCALE_KNOTS,
                lo,
                hi,
            );
            let pixel = clean_cube.pixel(t, n);
            varied.extend(pixel.iter().zip(curve.iter()).map(|(v, s)| v * s));
        }
    }
    let varied_cube = SequenceCube::new(t_count, height, width, bands, varied)?;
    let observed = add_awgn(&varied_cube, spec.snr_db.unwrap_or(f64::INFINITY), spec.seed)?;

    Ok((
        observed,
        GroundTruth {
            abundances,
            endmembers,
            clean_cube,
        },
    ))
}

// ---------------------------------------------------------------------------
// Random-field protocol (synth2)
// ---------------------------------------------------------------------------

/// Pool size for per-endmember variability variants.
const VARIANT_POOL: usize = 10;
const SPATIAL_LENGTH_SCALE: f64 = 8.0;
const TEMPORAL_LENGTH_SCALE: f64 = 4.0;
/// Softmax gain applied to the unit-variance random fields.
const FIELD_GAIN: f64 = 2.0;

fn generate_field_scene(spec: &SynthSpec) -> Result<(SequenceCube, GroundTruth), SynthError> {
    let root = Stream::new(spec.seed);
    let (t_count, height, width) = (spec.t_count, spec.height, spec.width);
    let (bands, p_count) = (spec.bands, spec.endmember_count);
    let n_count = height * width;

    let reference = gen_library_spectra(p_count, bands, spec.seed)?;

    // Per-endmember variant pools: reference row times a band-scaling curve.
    let pool_stream = root.derive(tag::VARIANT_POOL);
    let (lo, hi) = spec.scale_range;
    let pools: Vec<Vec<Vec<f64>>> = (0..p_count)
        .map(|p| {
            let row = &reference[p * bands..(p + 1) * bands];
            (0..VARIANT_POOL)
                .map(|v| {
                    let curve = scaling_curve(
                        &pool_stream.derive(p as u64).derive(v as u64),
                        bands,
                        SCALE_KNOTS,
                        lo,
                        hi,
                    );
                    row.iter().zip(curve.iter()).map(|(r, s)| r * s).collect()
                })
                .collect()
        })
        .collect();

    // Per-time endmembers select one variant per material.
    let select_stream = root.derive(tag::VARIANT_POOL).derive(0xfeed);
    let per_time: Vec<Vec<f64>> = (0..t_count)
        .map(|t| {
            let mut m = Vec::with_capacity(p_count * bands);
            for p in 0..p_count {
                let idx = select_stream.index_at((t * p_count + p) as u64, VARIANT_POOL);
                m.extend_from_slice(&pools[p][idx]);
            }
            m
        })
        .collect();
    let endmembers = EndmemberSet::new(p_count, bands, reference, per_time)?;

    // Gaussian random fields, separable squared-exponential covariance.
    let grf_stream = root.derive(tag::GRF);
    let fields: Vec<Vec<f64>> = (0..p_count)
        .map(|p| gaussian_random_field(&grf_stream.derive(p as u64), t_count, height, width))
        .collect();

    let mut abundances = AbundanceStack::zeros(t_count, n_count, p_count);
    for t in 0..t_count {
        for n in 0..n_count {
            let idx = t * n_count + n;
            let mut logits: Vec<f64> = fields.iter().map(|f| FIELD_GAIN * f[idx]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in &mut logits {
                *v = (*v - max).exp();
                sum += *v;
            }
            let row = abundances.row_mut(t, n);
            for (r, v) in row.iter_mut().zip(logits.iter()) {
                *r = v / sum;
            }
        }
    }

    // Persistent abrupt changes: from the change frame onward a disc becomes
    // a pure material.
    let mutation_stream = root.derive(tag::MUTATION).derive(0xabcd);
    for (k, &time) in spec.mutation_times.iter().enumerate() {
        let s = mutation_stream.derive(k as u64);
        let center = (s.index_at(0, height), s.index_at(1, width));
        let radius = s.range_at(2, 3.0, 6.0);
        let material = s.index_at(3, p_count);
        stamp_disc(
            &mut abundances,
            time - 1,
            t_count,
            height,
            width,
            center,
            radius,
            material,
        );
    }

    let clean_cube = lmm_reconstruct(&abundances, &endmembers, height, width)?;
    let observed = add_awgn(&clean_cube, spec.snr_db.unwrap_or(f64::INFINITY), spec.seed)?;

    Ok((
        observed,
        GroundTruth {
            abundances,
            endmembers,
            clean_cube,
        },
    ))
}

/// Unit-variance Gaussian random field on a `T x H x W` grid with separable
/// squared-exponential covariance (spatial length scale 8 px, temporal 4
/// frames), built by smoothing white noise with Gaussian kernels.
fn gaussian_random_field(stream: &Stream, t_count: usize, height: usize, width: usize) -> Vec<f64> {
    let count = t_count * height * width;
    let mut data: Vec<f64> = (0..count).map(|i| stream.normal_at(i as u64)).collect();
    // Convolving white noise with a Gaussian of std s yields SE covariance
    // with length scale s * sqrt(2).
    let spatial_sigma = SPATIAL_LENGTH_SCALE / std::f64::consts::SQRT_2;
    let temporal_sigma = TEMPORAL_LENGTH_SCALE / std::f64::consts::SQRT_2;
    let dims = [t_count, height, width];
    let strides = [height * width, width, 1];
    for axis in 0..3 {
        let sigma = if axis == 0 { temporal_sigma } else { spatial_sigma };
        data = convolve_axis(&data, dims, strides, axis, sigma);
    }
    // Reflection padding re-reads samples near the borders, which inflates
    // the variance on grids comparable to the kernel support; standardize
    // so the softmax gain downstream means the same thing for every seed.
    let mean = data.iter().sum::<f64>() / count as f64;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    let std = var.sqrt().max(1e-12);
    for v in &mut data {
        *v = (*v - mean) / std;
    }
    data
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    // Unit L2 norm keeps the smoothed white noise at unit variance.
    let norm = kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut kernel {
        *v /= norm;
    }
    kernel
}

fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

fn convolve_axis(
    data: &[f64],
    dims: [usize; 3],
    strides: [usize; 3],
    axis: usize,
    sigma: f64,
) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let n = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for a in 0..dims[oa] {
        for b in 0..dims[ob] {
            let base = a * strides[oa] + b * strides[ob];
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let j = reflect(i + k as isize - radius, n);
                    acc += kv * data[base + j * strides[axis]];
                }
                out[base + i as usize * strides[axis]] = acc;
            }
        }
    }
    out
}

//! Quantitative evaluation of unmixing results.
//!
//! Two normalized root mean square errors score an estimate. The abundance
//! metric normalizes per frame,
//!
//! ```text
//! NRMSE_A = sqrt( (1/T) sum_t sum_n ||a_{n,t} - est_{n,t}||^2 / ||a_t||^2 )
//! ```
//!
//! with `||a_t||` the Frobenius norm of the whole truth frame, while the
//! reconstruction metric normalizes per pixel,
//!
//! ```text
//! NRMSE_Y = sqrt( (1/T) sum_t mean_n ||y_{n,t} - est_{n,t} E_t||^2 / ||y_{n,t}||^2 )
//! ```
//!
//! The abundance metric's frame normalizer already absorbs the pixel count;
//! the reconstruction metric averages the per-pixel ratios so its scale
//! matches the reference results it is compared against. Blind methods
//! return endmembers in arbitrary order, so estimates are aligned to the
//! ground truth first by the permutation minimizing total spectral angle.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::hsidata::{spectral_angle, AbundanceStack, EndmemberSet, HsiError, SequenceCube};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("truth abundance frame t={t} has zero norm")]
    ZeroNormFrame { t: usize },
    #[error("observed pixel (t={t}, n={n}) has zero norm")]
    ZeroNormPixel { t: usize, n: usize },
    #[error("alignment supports at most 10 endmembers, got {0}")]
    TooManyEndmembers(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Hsi(#[from] HsiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scores of one method on one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub nrmse_a: f64,
    pub nrmse_y: f64,
    /// Per-frame abundance NRMSE (the `t`-th term of the sum, square-rooted).
    pub per_time_a: Vec<f64>,
    /// Per-frame reconstruction NRMSE.
    pub per_time_y: Vec<f64>,
    /// `alignment[i]` is the estimated endmember matched to truth row `i`.
    pub alignment: Vec<usize>,
}

/// Abundance NRMSE with per-frame normalization. Estimate columns must
/// already be aligned to the truth columns.
pub fn nrmse_a(truth: &AbundanceStack, est: &AbundanceStack) -> Result<f64, MetricsError> {
    let (total, _) = nrmse_a_terms(truth, est)?;
    Ok(total)
}

fn nrmse_a_terms(
    truth: &AbundanceStack,
    est: &AbundanceStack,
) -> Result<(f64, Vec<f64>), MetricsError> {
    if truth.t_count() != est.t_count()
        || truth.pixel_count() != est.pixel_count()
        || truth.endmember_count() != est.endmember_count()
    {
        return Err(MetricsError::DimensionMismatch(
            "abundance stacks differ in shape".into(),
        ));
    }
    let t_count = truth.t_count();
    let mut total = 0.0;
    let mut per_time = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let frame_norm_sq: f64 = truth.frame(t).iter().map(|v| v * v).sum();
        if frame_norm_sq <= 0.0 {
            return Err(MetricsError::ZeroNormFrame { t });
        }
        let err_sq: f64 = truth
            .frame(t)
            .iter()
            .zip(est.frame(t))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += err_sq / frame_norm_sq;
        per_time.push((err_sq / frame_norm_sq).sqrt());
    }
    Ok(((total / t_count as f64).sqrt(), per_time))
}

/// Reconstruction NRMSE with per-pixel normalization.
pub fn nrmse_y(
    cube: &SequenceCube,
    a: &AbundanceStack,
    e: &EndmemberSet,
) -> Result<f64, MetricsError> {
    let (total, _) = nrmse_y_terms(cube, a, e)?;
    Ok(total)
}

fn nrmse_y_terms(
    cube: &SequenceCube,
    a: &AbundanceStack,
    e: &EndmemberSet,
) -> Result<(f64, Vec<f64>), MetricsError> {
    if a.t_count() != cube.t_count()
        || a.pixel_count() != cube.pixel_count()
        || e.t_count() != cube.t_count()
        || e.bands() != cube.bands()
        || e.endmember_count() != a.endmember_count()
    {
        return Err(MetricsError::DimensionMismatch(
            "cube, abundances, and endmembers are inconsistent".into(),
        ));
    }
    let (t_count, n_count, _p, l) = (
        cube.t_count(),
        cube.pixel_count(),
        a.endmember_count(),
        cube.bands(),
    );
    let mut total = 0.0;
    let mut per_time = Vec::with_capacity(t_count);
    let mut recon = vec![0.0; l];
    for t in 0..t_count {
        let et = e.at_time(t);
        let mut frame_acc = 0.0;
        for n in 0..n_count {
            let pixel = cube.pixel(t, n);
            let pixel_norm_sq: f64 = pixel.iter().map(|v| v * v).sum();
            if pixel_norm_sq <= 0.0 {
                return Err(MetricsError::ZeroNormPixel { t, n });
            }
            recon.iter_mut().for_each(|v| *v = 0.0);
            for (pi, &ap) in a.row(t, n).iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                for (r, &ev) in recon.iter_mut().zip(&et[pi * l..(pi + 1) * l]) {
                    *r += ap * ev;
                }
            }
            let err_sq: f64 = pixel
                .iter()
                .zip(&recon)
                .map(|(y, r)| (y - r) * (y - r))
                .sum();
            frame_acc += err_sq / pixel_norm_sq;
        }
        total += frame_acc / n_count as f64;
        per_time.push((frame_acc / n_count as f64).sqrt());
    }
    Ok(((total / t_count as f64).sqrt(), per_time))
}

/// Permutation aligning estimated endmembers to reference ones: entry `i`
/// is the estimate row matched to truth row `i`, minimizing the total
/// spectral angle (exhaustive search in lexicographic order, so ties resolve
/// to the lexicographically smallest permutation).
pub fn align_endmembers(
    truth: &EndmemberSet,
    est: &EndmemberSet,
) -> Result<Vec<usize>, MetricsError> {
    let p = truth.endmember_count();
    if est.endmember_count() != p || est.bands() != truth.bands() {
        return Err(MetricsError::DimensionMismatch(
            "endmember sets differ in shape".into(),
        ));
    }
    if p > 10 {
        return Err(MetricsError::TooManyEndmembers(p));
    }
    let mut cost = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            cost[i * p + j] = spectral_angle(truth.reference_row(i), est.reference_row(j));
        }
    }
    let mut perm: Vec<usize> = (0..p).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * p + j]).sum();
        if total < best_cost {
            best_cost = total;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

/// Lexicographic successor in place; `false` once the last permutation is
/// reached.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Reorder estimate columns so column `i` holds the material matched to the
/// truth's endmember `i`.
pub fn permute_abundance_columns(a: &AbundanceStack, perm: &[usize]) -> AbundanceStack {
    let (t_count, n_count, p) = (a.t_count(), a.pixel_count(), a.endmember_count());
    let mut values = vec![0.0; t_count * n_count * p];
    for t in 0..t_count {
        for n in 0..n_count {
            let src = a.row(t, n);
            let dst = &mut values[(t * n_count + n) * p..(t * n_count + n + 1) * p];
            for (i, &j) in perm.iter().enumerate() {
                dst[i] = src[j];
            }
        }
    }
    AbundanceStack::new(t_count, n_count, p, values).expect("permutation preserves shape")
}

/// Reorder endmember rows (reference and every frame) by the permutation.
pub fn permute_endmember_rows(e: &EndmemberSet, perm: &[usize]) -> EndmemberSet {
    let (p, l) = (e.endmember_count(), e.bands());
    let pick = |m: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(p * l);
        for &j in perm {
            out.extend_from_slice(&m[j * l..(j + 1) * l]);
        }
        out
    };
    let per_time: Vec<Vec<f64>> = (0..e.t_count()).map(|t| pick(e.at_time(t))).collect();
    EndmemberSet::new(p, l, pick(e.reference()), per_time).expect("permutation preserves shape")
}

/// Align an estimate to the ground truth and score it with both metrics.
pub fn evaluate(
    truth_a: &AbundanceStack,
    truth_e: &EndmemberSet,
    est_a: &AbundanceStack,
    est_e: &EndmemberSet,
    cube: &SequenceCube,
) -> Result<EvalReport, MetricsError> {
    let alignment = align_endmembers(truth_e, est_e)?;
    let aligned_a = permute_abundance_columns(est_a, &alignment);
    let aligned_e = permute_endmember_rows(est_e, &alignment);
    let (a_total, per_time_a) = nrmse_a_terms(truth_a, &aligned_a)?;
    let (y_total, per_time_y) = nrmse_y_terms(cube, &aligned_a, &aligned_e)?;
    Ok(EvalReport {
        nrmse_a: a_total,
        nrmse_y: y_total,
        per_time_a,
        per_time_y,
        alignment,
    })
}

// ---------------------------------------------------------------------------
// Abundance map export
// ---------------------------------------------------------------------------

/// Write one 8-bit binary portable graymap per `(frame, endmember)`, values
/// scaled linearly from `[0, 1]`. Returns the written paths.
pub fn export_maps(
    a: &AbundanceStack,
    height: usize,
    width: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, MetricsError> {
    if height * width != a.pixel_count() {
        return Err(MetricsError::DimensionMismatch(format!(
            "height*width = {} but stack has {} pixels",
            height * width,
            a.pixel_count()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for t in 0..a.t_count() {
        for p in 0..a.endmember_count() {
            let path = dir.join(format!("map_t{:02}_e{:02}.pgm", t + 1, p + 1));
            let mut payload = Vec::with_capacity(a.pixel_count());
            for n in 0..a.pixel_count() {
                let v = a.row(t, n)[p].clamp(0.0, 1.0);
                payload.push((v * 255.0).round() as u8);
            }
            let mut file = Vec::with_capacity(payload.len() + 32);
            file.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
            file.extend_from_slice(&payload);
            std::fs::write(&path, file)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Read back a binary PGM written by [`export_maps`]; returns `(pixels,
/// height, width)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize), MetricsError> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| MetricsError::DimensionMismatch("malformed PGM header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| MetricsError::DimensionMismatch("malformed PGM header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(MetricsError::DimensionMismatch("not a P5 graymap".into()));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|v| v.parse().ok())
        .collect();
    if dims.len() != 2 {
        return Err(MetricsError::DimensionMismatch("bad PGM dims".into()));
    }
    Ok((bytes[header_end + 1..].to_vec(), dims[1], dims[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn stack_from(values: Vec<f64>, t: usize, n: usize, p: usize) -> AbundanceStack {
        AbundanceStack::new(t, n, p, values).unwrap()
    }

    #[test]
    fn nrmse_a_zero_for_identical_stacks() {
        let a = stack_from(vec![0.2, 0.8, 0.5, 0.5], 1, 2, 2);
        assert_eq!(nrmse_a(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn nrmse_a_matches_hand_arithmetic() {
        // T=1, N=1, truth (1,0), est (0,1): sqrt(2 / 1)
        let truth = stack_from(vec![1.0, 0.0], 1, 1, 2);
        let est = stack_from(vec![0.0, 1.0], 1, 1, 2);
        let v = nrmse_a(&truth, &est).unwrap();
        assert!((v - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nrmse_a_rejects_zero_norm_frame() {
        let truth = stack_from(vec![0.0, 0.0], 1, 1, 2);
        let est = stack_from(vec![0.1, 0.9], 1, 1, 2);
        assert!(matches!(
            nrmse_a(&truth, &est),
            Err(MetricsError::ZeroNormFrame { t: 0 })
        ));
    }

    #[test]
    fn nrmse_a_matches_brute_force_on_random_instances() {
        let stream = Stream::new(61);
        for case in 0..100_u64 {
            let (t, n, p) = (2, 3, 2);
            let truth_v: Vec<f64> = (0..t * n * p)
                .map(|i| 0.1 + stream.f64_at(case * 131 + i as u64))
                .collect();
            let est_v: Vec<f64> = (0..t * n * p)
                .map(|i| stream.f64_at(10_000 + case * 131 + i as u64))
                .collect();
            let truth = stack_from(truth_v.clone(), t, n, p);
            let est = stack_from(est_v.clone(), t, n, p);

            let mut acc = 0.0;
            for ti in 0..t {
                let mut num = 0.0;
                let mut den = 0.0;
                for ni in 0..n {
                    for pi in 0..p {
                        let idx = (ti * n + ni) * p + pi;
                        num += (truth_v[idx] - est_v[idx]) * (truth_v[idx] - est_v[idx]);
                        den += truth_v[idx] * truth_v[idx];
                    }
                }
                acc += num / den;
            }
            let expected = (acc / t as f64).sqrt();
            assert!((nrmse_a(&truth, &est).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nrmse_y_zero_on_exact_factors() {
        let e = EndmemberSet::constant(2, 3, vec![0.9, 0.2, 0.4, 0.1, 0.8, 0.3], 2).unwrap();
        let a = stack_from(vec![0.3, 0.7, 1.0, 0.0, 0.5, 0.5, 0.2, 0.8], 2, 2, 2);
        let cube = crate::hsidata::lmm_reconstruct(&a, &e, 1, 2).unwrap();
        assert!(nrmse_y(&cube, &a, &e).unwrap() < 1e-10);
    }

    #[test]
    fn nrmse_y_matches_hand_arithmetic() {
        // single pixel y = (1, 0), reconstruction (0, 0)
        let e = EndmemberSet::constant(2, 2, vec![0.5, 0.5, 0.25, 0.75], 1).unwrap();
        let a = stack_from(vec![0.0, 0.0], 1, 1, 2);
        let cube = SequenceCube::new(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert!((nrmse_y(&cube, &a, &e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nrmse_y_rejects_zero_pixel() {
        let e = EndmemberSet::constant(2, 2, vec![0.5, 0.5, 0.25, 0.75], 1).unwrap();
        let a = stack_from(vec![0.5, 0.5], 1, 1, 2);
        let cube = SequenceCube::new(1, 1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            nrmse_y(&cube, &a, &e),
            Err(MetricsError::ZeroNormPixel { t: 0, n: 0 })
        ));
    }

    #[test]
    fn nrmse_y_matches_brute_force_on_random_instances() {
        let stream = Stream::new(93);
        for case in 0..100_u64 {
            let (t, n, p, l) = (2, 2, 2, 3);
            let a_v: Vec<f64> = (0..t * n * p)
                .map(|i| stream.f64_at(case * 311 + i as u64))
                .collect();
            let e_ref: Vec<f64> = (0..p * l)
                .map(|i| 0.1 + stream.f64_at(20_000 + case * 311 + i as u64))
                .collect();
            let per_time: Vec<Vec<f64>> = (0..t)
                .map(|ti| {
                    (0..p * l)
                        .map(|i| 0.1 + stream.f64_at(30_000 + case * 311 + (ti * p * l + i) as u64))
                        .collect()
                })
                .collect();
            let y_v: Vec<f64> = (0..t * n * l)
                .map(|i| 0.2 + stream.f64_at(40_000 + case * 311 + i as u64))
                .collect();
            let a = stack_from(a_v.clone(), t, n, p);
            let e = EndmemberSet::new(p, l, e_ref, per_time.clone()).unwrap();
            let cube = SequenceCube::new(t, 1, n, l, y_v.clone()).unwrap();

            let mut acc = 0.0;
            for ti in 0..t {
                let mut frame = 0.0;
                for ni in 0..n {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for li in 0..l {
                        let mut rec = 0.0;
                        for pi in 0..p {
                            rec += a_v[(ti * n + ni) * p + pi] * per_time[ti][pi * l + li];
                        }
                        let y = y_v[(ti * n + ni) * l + li];
                        num += (y - rec) * (y - rec);
                        den += y * y;
                    }
                    frame += num / den;
                }
                acc += frame / n as f64;
            }
            let expected = (acc / t as f64).sqrt();
            assert!((nrmse_y(&cube, &a, &e).unwrap() - expected).abs() < 1e-12);
        }
    }

    fn library_set(seed: u64, p: usize, l: usize) -> EndmemberSet {
        let e = crate::synthgen::gen_library_spectra(p, l, seed).unwrap();
        EndmemberSet::constant(p, l, e, 1).unwrap()
    }

    #[test]
    fn alignment_of_identical_sets_is_identity() {
        let e = library_set(5, 3, 32);
        assert_eq!(align_endmembers(&e, &e).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn alignment_recovers_a_row_swap() {
        let e = library_set(6, 3, 32);
        let swapped = permute_endmember_rows(&e, &[1, 0, 2]);
        // truth row 0 matches swapped row 1 and vice versa
        assert_eq!(align_endmembers(&e, &swapped).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn alignment_matches_exhaustive_oracle_on_noisy_estimates() {
        let l = 64;
        let truth = library_set(9, 3, l);
        let stream = Stream::new(17);
        // noisy, shuffled estimate
        let order = [2usize, 0, 1];
        let mut est_vals = Vec::new();
        for &j in &order {
            for (i, v) in truth.reference_row(j).iter().enumerate() {
                est_vals.push(v + 0.02 * (stream.f64_at((j * l + i) as u64) - 0.5));
            }
        }
        let est = EndmemberSet::constant(3, l, est_vals, 1).unwrap();
        let perm = align_endmembers(&truth, &est).unwrap();

        // independent brute force over all six permutations
        let mut best = vec![0, 1, 2];
        let mut best_cost = f64::INFINITY;
        let all = [
            [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
        ];
        for cand in all {
            let cost: f64 = (0..3)
                .map(|i| spectral_angle(truth.reference_row(i), est.reference_row(cand[i])))
                .sum();
            if cost < best_cost {
                best_cost = cost;
                best = cand.to_vec();
            }
        }
        assert_eq!(perm, best);
        // and the alignment undoes the shuffle
        assert_eq!(perm, vec![1, 2, 0]);
    }

    #[test]
    fn aligned_nrmse_is_minimal_over_permutations() {
        let stream = Stream::new(23);
        let l = 32;
        let truth_e = EndmemberSet::constant(
            3,
            l,
            crate::synthgen::gen_library_spectra(3, l, 31).unwrap(),
            2,
        )
        .unwrap();
        let truth_a = stack_from(
            (0..2 * 4 * 3).map(|i| stream.f64_at(i as u64)).collect(),
            2,
            4,
            3,
        );
        // estimate = truth with shuffled materials plus noise
        let order = [2usize, 1, 0];
        let est_e = permute_endmember_rows(&truth_e, &order);
        let mut est_vals = Vec::new();
        for t in 0..2 {
            for n in 0..4 {
                let row = truth_a.row(t, n);
                for &j in &order {
                    est_vals.push(row[j] + 0.01 * (stream.f64_at((t * 64 + n * 7 + j) as u64) - 0.5));
                }
            }
        }
        let est_a = stack_from(est_vals, 2, 4, 3);
        let cube = crate::hsidata::lmm_reconstruct(
            &truth_a,
            &EndmemberSet::constant(3, l, truth_e.reference().to_vec(), 2).unwrap(),
            2,
            2,
        )
        .unwrap();
        let report = evaluate(&truth_a, &truth_e, &est_a, &est_e, &cube).unwrap();

        let all = [
            [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
        ];
        for cand in all {
            let candidate = nrmse_a(&truth_a, &permute_abundance_columns(&est_a, &cand)).unwrap();
            assert!(report.nrmse_a <= candidate + 1e-12, "beaten by {cand:?}");
        }
    }

    #[test]
    fn alignment_rejects_large_p() {
        let p = 11;
        let l = 16;
        let vals = vec![0.5; p * l];
        // EndmemberSet requires >= 2 rows; 11 rows triggers the cap instead
        let e = EndmemberSet::constant(p, l, vals, 1).unwrap();
        assert!(matches!(
            align_endmembers(&e, &e),
            Err(MetricsError::TooManyEndmembers(11))
        ));
    }

    #[test]
    fn exported_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = stack_from(vec![1.0, 0.0, 0.25, 0.75], 1, 2, 2);
        let paths = export_maps(&a, 1, 2, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let (pixels, h, w) = read_pgm(&paths[0]).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(pixels, vec![255, 64]); // 1.0 -> 255, 0.25 -> 64
        let (pixels, _, _) = read_pgm(&paths[1]).unwrap();
        assert_eq!(pixels, vec![0, 191]);
    }

    #[test]
    fn constant_maps_saturate() {
        let dir = tempfile::tempdir().unwrap();
        let ones = stack_from(vec![1.0; 6], 1, 6, 1);
        let paths = export_maps(&ones, 2, 3, dir.path()).unwrap();
        let (pixels, _, _) = read_pgm(&paths[0]).unwrap();
        assert!(pixels.iter().all(|&v| v == 255));
        let zeros = stack_from(vec![0.0; 6], 1, 6, 1);
        let dir2 = tempfile::tempdir().unwrap();
        let paths = export_maps(&zeros, 2, 3, dir2.path()).unwrap();
        let (pixels, _, _) = read_pgm(&paths[0]).unwrap();
        assert!(pixels.iter().all(|&v| v == 0));
    }
}

//! Classical baselines: VCA endmember extraction and the FCLS abundance
//! solver.
//!
//! VCA pools the pixels of every frame into one cloud, projects them to an
//! affine `p`-dimensional representation (mean-removed principal subspace of
//! dimension `p - 1` plus a constant coordinate), and then repeatedly picks
//! the pixel with the largest projection onto a direction orthogonal to the
//! span of the pixels already selected. Selected endmembers are actual pixel
//! spectra.
//!
//! FCLS solves, per pixel, `min ||y - a E||^2` over the probability simplex.
//! The sum-to-one constraint is imposed through the classical weighted-row
//! augmentation (weight `DELTA = 1e3`) of a Lawson-Hanson nonnegative least
//! squares solve, followed by exact renormalization.

use rayon::prelude::*;
use thiserror::Error;

use crate::hsidata::{AbundanceStack, EndmemberSet, HsiError, SequenceCube};
use crate::rng::{tag, Stream};

/// Weight of the sum-to-one row in the augmented FCLS system.
const DELTA: f64 = 1e3;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("rank-deficient data: subspace dimension {found} < required {needed}")]
    RankDeficient { needed: usize, found: usize },
    #[error("active-set did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("singular least-squares system on the passive set")]
    SingularSystem,
    #[error("degenerate pixel: nonnegative solution sums to zero")]
    DegeneratePixel,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pixel (t={t}, n={n}): {source}")]
    PixelSolve {
        t: usize,
        n: usize,
        #[source]
        source: Box<InitError>,
    },
    #[error(transparent)]
    Hsi(#[from] HsiError),
}

// ---------------------------------------------------------------------------
// VCA
// ---------------------------------------------------------------------------

/// Endmembers selected by VCA, together with the pixels they came from.
#[derive(Debug, Clone)]
pub struct VcaResult {
    /// `p x L` row-major matrix; each row is an actual pixel spectrum.
    pub endmembers: Vec<f64>,
    /// `(t, n)` coordinates of the selected pixels, in selection order.
    pub selected: Vec<(usize, usize)>,
}

/// Vertex component analysis over all frames pooled into one pixel cloud.
///
/// Deterministic given the seed; ties in the projection maximization are
/// broken toward the lowest flat pixel index.
pub fn vca(cube: &SequenceCube, p: usize, seed: u64) -> Result<VcaResult, InitError> {
    let bands = cube.bands();
    if p < 2 || p > bands {
        return Err(InitError::DimensionMismatch(format!(
            "endmember count {p} must be in [2, {bands}]"
        )));
    }
    let n_per_frame = cube.pixel_count();
    let total = cube.t_count() * n_per_frame;
    if total < p {
        return Err(InitError::DimensionMismatch(format!(
            "cube has {total} pixels, need at least {p}"
        )));
    }

    // Mean spectrum over the pooled cloud.
    let mut mean = vec![0.0; bands];
    for t in 0..cube.t_count() {
        for n in 0..n_per_frame {
            for (m, v) in mean.iter_mut().zip(cube.pixel(t, n)) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }

    // Upper triangle of the covariance of mean-removed pixels.
    let mut cov = vec![0.0; bands * bands];
    let mut centered = vec![0.0; bands];
    for t in 0..cube.t_count() {
        for n in 0..n_per_frame {
            let pixel = cube.pixel(t, n);
            for ((c, v), m) in centered.iter_mut().zip(pixel).zip(&mean) {
                *c = v - m;
            }
            for i in 0..bands {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let row = &mut cov[i * bands..(i + 1) * bands];
                for (j, &cj) in centered.iter().enumerate().skip(i) {
                    row[j] += ci * cj;
                }
            }
        }
    }
    for i in 0..bands {
        for j in i..bands {
            cov[i * bands + j] /= total as f64;
            cov[j * bands + i] = cov[i * bands + j];
        }
    }

    // Top p-1 principal directions by power iteration with deflation.
    let trace: f64 = (0..bands).map(|i| cov[i * bands + i]).sum();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(p - 1);
    let mut top_eigenvalue = 0.0;
    for k in 0..(p - 1) {
        let (value, vector) = power_iteration(&cov, bands, 300);
        if k == 0 {
            top_eigenvalue = value;
        }
        let floor = (1e-12 * top_eigenvalue).max(1e-14 * trace / bands as f64);
        if !(value.is_finite() && value > floor && value > 0.0) {
            return Err(InitError::RankDeficient {
                needed: p - 1,
                found: k,
            });
        }
        deflate(&mut cov, bands, value, &vector);
        basis.push(vector);
    }

    // Affine embedding: principal coordinates plus a constant component.
    let mut projected = vec![0.0; total * p];
    let mut max_norm = 0.0_f64;
    for t in 0..cube.t_count() {
        for n in 0..n_per_frame {
            let flat = t * n_per_frame + n;
            let pixel = cube.pixel(t, n);
            let out = &mut projected[flat * p..flat * p + p];
            let mut sq = 0.0;
            for (k, direction) in basis.iter().enumerate() {
                let mut dot = 0.0;
                for ((v, m), d) in pixel.iter().zip(&mean).zip(direction) {
                    dot += (v - m) * d;
                }
                out[k] = dot;
                sq += dot * dot;
            }
            max_norm = max_norm.max(sq.sqrt());
        }
    }
    for flat in 0..total {
        projected[flat * p + p - 1] = max_norm;
    }

    // Iterative orthogonal-direction maximization.
    let mut direction_rng = Stream::new(seed).derive(tag::VCA_DIRECTION).sequence();
    let mut ortho_basis: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut selected_flat: Vec<usize> = Vec::with_capacity(p);
    for _ in 0..p {
        let w = orthogonal_direction(&ortho_basis, p, &mut direction_rng)?;
        let mut best_flat = 0;
        let mut best_score = f64::NEG_INFINITY;
        for flat in 0..total {
            let x = &projected[flat * p..flat * p + p];
            let score = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().abs();
            if score > best_score {
                best_score = score;
                best_flat = flat;
            }
        }
        selected_flat.push(best_flat);
        // Extend the orthonormal basis with the newly selected vector.
        let x = projected[best_flat * p..best_flat * p + p].to_vec();
        if let Some(q) = orthonormal_residual(&ortho_basis, &x) {
            ortho_basis.push(q);
        }
    }

    let mut endmembers = Vec::with_capacity(p * bands);
    let mut selected = Vec::with_capacity(p);
    for &flat in &selected_flat {
        let t = flat / n_per_frame;
        let n = flat % n_per_frame;
        endmembers.extend_from_slice(cube.pixel(t, n));
        selected.push((t, n));
    }
    Ok(VcaResult {
        endmembers,
        selected,
    })
}

/// Dominant eigenpair of a symmetric matrix, fixed deterministic start.
fn power_iteration(matrix: &[f64], n: usize, iterations: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let norm = (n as f64).sqrt();
    for x in &mut v {
        *x /= norm;
    }
    let mut value = 0.0;
    let mut mv = vec![0.0; n];
    for _ in 0..iterations {
        for (i, out) in mv.iter_mut().enumerate() {
            let row = &matrix[i * n..(i + 1) * n];
            *out = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        value = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let norm = mv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return (0.0, v);
        }
        for (x, m) in v.iter_mut().zip(&mv) {
            *x = m / norm;
        }
    }
    (value, v)
}

fn deflate(matrix: &mut [f64], n: usize, value: f64, vector: &[f64]) {
    for i in 0..n {
        for j in 0..n {
            matrix[i * n + j] -= value * vector[i] * vector[j];
        }
    }
}

/// Unit vector orthogonal to the span of `basis` (an orthonormal list),
/// drawn from the seeded sequence; redraws on near-zero residuals.
fn orthogonal_direction(
    basis: &[Vec<f64>],
    dim: usize,
    rng: &mut crate::rng::Sequence,
) -> Result<Vec<f64>, InitError> {
    for _ in 0..64 {
        let f: Vec<f64> = (0..dim).map(|_| rng.next_f64() - 0.5).collect();
        if let Some(w) = orthonormal_residual(basis, &f) {
            return Ok(w);
        }
    }
    Err(InitError::RankDeficient {
        needed: basis.len() + 1,
        found: basis.len(),
    })
}

/// Gram-Schmidt residual of `x` against an orthonormal basis, normalized;
/// `None` if the residual is numerically zero.
fn orthonormal_residual(basis: &[Vec<f64>], x: &[f64]) -> Option<Vec<f64>> {
    let mut r = x.to_vec();
    for q in basis {
        let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
        for (ri, qi) in r.iter_mut().zip(q) {
            *ri -= dot * qi;
        }
    }
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    if norm <= 1e-9 * scale {
        return None;
    }
    for v in &mut r {
        *v /= norm;
    }
    Some(r)
}

// ---------------------------------------------------------------------------
// FCLS
// ---------------------------------------------------------------------------

/// Fully constrained least squares for one pixel.
///
/// Returns the abundance vector minimizing `||y - a E||^2` subject to the
/// nonnegativity and sum-to-one constraints. `endmembers` is the `p x L`
/// row-major matrix.
pub fn fcls_pixel(y: &[f64], endmembers: &[f64], p: usize) -> Result<Vec<f64>, InitError> {
    let l = y.len();
    if endmembers.len() != p * l {
        return Err(InitError::DimensionMismatch(format!(
            "endmember matrix has {} values, expected {p} x {l}",
            endmembers.len()
        )));
    }
    // Augmented system: rows are the L bands plus one sum-to-one row of
    // weight DELTA. Columns (one per endmember) are stored contiguously.
    let rows = l + 1;
    let mut columns = vec![0.0; rows * p];
    for j in 0..p {
        let col = &mut columns[j * rows..(j + 1) * rows];
        for (band, c) in col[..l].iter_mut().enumerate() {
            *c = endmembers[j * l + band];
        }
        col[l] = DELTA;
    }
    let mut b = Vec::with_capacity(rows);
    b.extend_from_slice(y);
    b.push(DELTA);

    let x = nnls(&columns, &b, rows, p)?;
    let sum: f64 = x.iter().sum();
    if sum <= 0.0 {
        return Err(InitError::DegeneratePixel);
    }
    Ok(x.iter().map(|v| v / sum).collect())
}

/// Lawson-Hanson active-set nonnegative least squares.
///
/// `columns` holds the `rows x cols` design matrix column-major. Errors out
/// after `10 * cols` outer iterations.
fn nnls(columns: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>, InitError> {
    let max_outer = 10 * cols;
    let mut x = vec![0.0; cols];
    let mut passive = vec![false; cols];
    let mut residual = b.to_vec();

    // Tolerance on the dual vector, scaled to the problem.
    let gradient_scale: f64 = (0..cols)
        .map(|j| {
            columns[j * rows..(j + 1) * rows]
                .iter()
                .zip(b)
                .map(|(a, bi)| a * bi)
                .sum::<f64>()
                .abs()
        })
        .fold(1.0_f64, f64::max);
    let tol = 1e-12 * gradient_scale;

    for _ in 0..max_outer {
        // Dual vector on the zero set.
        let mut best = None;
        let mut best_w = tol;
        for j in 0..cols {
            if passive[j] {
                continue;
            }
            let w: f64 = columns[j * rows..(j + 1) * rows]
                .iter()
                .zip(&residual)
                .map(|(a, r)| a * r)
                .sum();
            if w > best_w {
                best_w = w;
                best = Some(j);
            }
        }
        let Some(enter) = best else {
            return Ok(x); // KKT satisfied
        };
        passive[enter] = true;

        // Inner loop: unconstrained solve on the passive set, stepping back
        // whenever a passive coefficient would turn negative.
        loop {
            let active_idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
            let z = solve_normal_equations(columns, b, rows, &active_idx)?;
            if z.iter().all(|&v| v > 0.0) {
                x.iter_mut().for_each(|v| *v = 0.0);
                for (zi, &j) in z.iter().zip(&active_idx) {
                    x[j] = *zi;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (zi, &j) in z.iter().zip(&active_idx) {
                if *zi <= 0.0 {
                    let denom = x[j] - zi;
                    if denom > 1e-300 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            for (zi, &j) in z.iter().zip(&active_idx) {
                x[j] += alpha * (zi - x[j]);
            }
            for &j in &active_idx {
                if x[j] <= 1e-14 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }

        for (i, r) in residual.iter_mut().enumerate() {
            let mut acc = b[i];
            for j in 0..cols {
                if x[j] != 0.0 {
                    acc -= columns[j * rows + i] * x[j];
                }
            }
            *r = acc;
        }
    }
    Err(InitError::NonConvergence {
        iterations: max_outer,
    })
}

/// Solve `min ||A_S z - b||` for the subset `S` of columns via the normal
/// equations with partially pivoted Gaussian elimination.
fn solve_normal_equations(
    columns: &[f64],
    b: &[f64],
    rows: usize,
    subset: &[usize],
) -> Result<Vec<f64>, InitError> {
    let k = subset.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (a, &ja) in subset.iter().enumerate() {
        let col_a = &columns[ja * rows..(ja + 1) * rows];
        rhs[a] = col_a.iter().zip(b).map(|(x, y)| x * y).sum();
        for (c, &jc) in subset.iter().enumerate().skip(a) {
            let col_c = &columns[jc * rows..(jc + 1) * rows];
            let v: f64 = col_a.iter().zip(col_c).map(|(x, y)| x * y).sum();
            gram[a * k + c] = v;
            gram[c * k + a] = v;
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut perm: Vec<usize> = (0..k).collect();
    for col in 0..k {
        let (pivot_row, pivot_val) = (col..k)
            .map(|r| (r, gram[perm[r] * k + col].abs()))
            .fold((col, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if pivot_val < 1e-30 {
            return Err(InitError::SingularSystem);
        }
        perm.swap(col, pivot_row);
        let prow = perm[col];
        for r in (col + 1)..k {
            let row = perm[r];
            let factor = gram[row * k + col] / gram[prow * k + col];
            if factor == 0.0 {
                continue;
            }
            for c in col..k {
                gram[row * k + c] -= factor * gram[prow * k + c];
            }
            rhs[row] -= factor * rhs[prow];
        }
    }
    let mut z = vec![0.0; k];
    for col in (0..k).rev() {
        let row = perm[col];
        let mut acc = rhs[row];
        for c in (col + 1)..k {
            acc -= gram[row * k + c] * z[c];
        }
        z[col] = acc / gram[row * k + col];
    }
    Ok(z)
}

/// FCLS applied to every pixel of every frame, in parallel.
///
/// `endmembers.t_count()` must equal the cube's; each frame is solved against
/// its own `E_t`. Parallel execution writes disjoint output slots, so the
/// result is identical to a sequential run.
pub fn fcls_stack(
    cube: &SequenceCube,
    endmembers: &EndmemberSet,
) -> Result<AbundanceStack, InitError> {
    if endmembers.t_count() != cube.t_count() {
        return Err(InitError::DimensionMismatch(format!(
            "cube T={} vs endmember T={}",
            cube.t_count(),
            endmembers.t_count()
        )));
    }
    if endmembers.bands() != cube.bands() {
        return Err(InitError::DimensionMismatch(format!(
            "cube L={} vs endmember L={}",
            cube.bands(),
            endmembers.bands()
        )));
    }
    let (t_count, n_count, p) = (
        cube.t_count(),
        cube.pixel_count(),
        endmembers.endmember_count(),
    );
    let mut values = vec![0.0; t_count * n_count * p];
    let results: Result<Vec<()>, InitError> = values
        .par_chunks_mut(p)
        .enumerate()
        .map(|(flat, out)| {
            let t = flat / n_count;
            let n = flat % n_count;
            let a = fcls_pixel(cube.pixel(t, n), endmembers.at_time(t), p).map_err(|e| {
                InitError::PixelSolve {
                    t,
                    n,
                    source: Box::new(e),
                }
            })?;
            out.copy_from_slice(&a);
            Ok(())
        })
        .collect();
    results?;
    Ok(AbundanceStack::new(t_count, n_count, p, values)?)
}

//! Vertex Component Analysis.
//!
//! Endmembers are picked from the data itself: after reducing the pixels to
//! a `p`-dimensional representation, each step projects all pixels onto a
//! random direction orthogonal to the span of the endmembers found so far
//! and keeps the pixel with the largest absolute projection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cube::HyperCube;
use crate::endmember::{default_names, EndmemberSet};
use crate::error::{Error, Result};

/// Singular values below this are treated as zero in the projector.
const PINV_EPS: f64 = 1e-10;

/// SNR (dB) above which the projective projection is used.
pub fn snr_threshold(p: usize) -> f64 {
    15.0 + 10.0 * (p as f64).log10()
}

/// `B x N` matrix with one pixel per column.
fn band_major(pixels: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (n, b) = pixels.dim();
    DMatrix::from_fn(b, n, |i, j| pixels[[j, i]])
}

/// Leading `k` eigenvectors of a symmetric matrix, largest eigenvalue first.
///
/// Each vector's largest-magnitude entry is made positive so the basis does
/// not depend on solver sign conventions.
fn leading_eigenvectors(sym: DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let rows = eig.eigenvectors.nrows();
    let mut out = DMatrix::zeros(rows, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        let pivot = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        out.set_column(c, &v);
    }
    out
}

fn column_mean(r: &DMatrix<f64>) -> DVector<f64> {
    r.column_mean()
}

/// Signal-to-noise estimate in dB from the power captured by the leading
/// `p`-dimensional subspace of the mean-removed data.
///
/// Returns `f64::INFINITY` when the data has no residual outside that
/// subspace.
pub fn estimate_snr(pixels: ArrayView2<'_, f64>, p: usize) -> Result<f64> {
    let (n, b) = pixels.dim();
    if p == 0 || p >= n.min(b) {
        return Err(Error::InvalidArgument(format!(
            "subspace dimension {p} must be in 1..{} for {n} pixels x {b} bands",
            n.min(b)
        )));
    }
    let r = band_major(pixels);
    let mean = column_mean(&r);
    let centered = centered(&r, &mean);
    let ud = leading_eigenvectors(&centered * centered.transpose() / n as f64, p);
    let x = ud.transpose() * &centered;
    Ok(snr_from_powers(&r, &x, &mean))
}

fn centered(r: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = r.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
    }
    c
}

fn snr_from_powers(r: &DMatrix<f64>, x: &DMatrix<f64>, mean: &DVector<f64>) -> f64 {
    let (b, n) = r.shape();
    let p = x.nrows() as f64;
    let p_y = r.norm_squared() / n as f64;
    let p_x = x.norm_squared() / n as f64 + mean.norm_squared();
    let residual = p_y - p_x;
    if residual <= 1e-12 * p_y {
        return f64::INFINITY;
    }
    let signal = p_x - p / b as f64 * p_y;
    if signal <= 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (signal / residual).log10()
}

/// Lowest index wins ties.
fn argmax_abs(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v.abs() > best.1 {
            best = (i, v.abs());
        }
    }
    best.0
}

/// Indices (row-major pixel order) of the `p` selected pixels.
pub fn vca_select(pixels: ArrayView2<'_, f64>, p: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<DVector<f64>> = (0..p)
        .map(|_| DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    vca_select_with_directions(pixels, p, &directions)
}

/// As [`vca_select`] with caller-supplied random directions (one length-`p`
/// vector per step).
pub fn vca_select_with_directions(pixels: ArrayView2<'_, f64>, p: usize, directions: &[DVector<f64>]) -> Result<Vec<usize>> {
    let (n, b) = pixels.dim();
    if p == 0 {
        return Err(Error::InvalidArgument("endmember count must be >= 1".into()));
    }
    if p > n {
        return Err(Error::InvalidArgument(format!("{p} endmembers requested from {n} pixels")));
    }
    if directions.len() != p || directions.iter().any(|d| d.len() != p) {
        return Err(Error::InvalidArgument(format!("need {p} directions of length {p}")));
    }
    let first = pixels.row(0);
    let identical = pixels.rows().into_iter().all(|row| row == first);
    if identical && p > 1 {
        return Err(Error::DegenerateData("all pixels are identical".into()));
    }
    let r = band_major(pixels);

    if p == 1 {
        let ud = leading_eigenvectors(&r * r.transpose() / n as f64, 1);
        let proj = ud.transpose() * &r;
        return Ok(vec![argmax_abs(proj.iter().cloned())]);
    }
    if p >= b {
        return Err(Error::InvalidArgument(format!("{p} endmembers need more than {b} bands")));
    }

    let mean = column_mean(&r);
    let centered = centered(&r, &mean);
    let ud = leading_eigenvectors(&centered * centered.transpose() / n as f64, p);
    let x_p = ud.transpose() * &centered;
    let snr = snr_from_powers(&r, &x_p, &mean);
    log::debug!("VCA SNR estimate {snr:.2} dB (threshold {:.2})", snr_threshold(p));

    let y = if snr > snr_threshold(p) {
        // Projective projection onto the hyperplane <u, y> = 1.
        let ud = leading_eigenvectors(&r * r.transpose() / n as f64, p);
        let x = ud.transpose() * &r;
        let u = column_mean(&x);
        let mut y = x.clone();
        for (j, mut col) in y.column_iter_mut().enumerate() {
            let denom = u.dot(&x.column(j));
            if denom.abs() < 1e-300 {
                return Err(Error::DegenerateData(format!("pixel {j} projects to zero")));
            }
            col /= denom;
        }
        y
    } else {
        let d = p - 1;
        let x = x_p.rows(0, d).clone_owned();
        let c = x.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
        let mut y = DMatrix::zeros(p, n);
        y.rows_mut(0, d).copy_from(&x);
        y.row_mut(d).fill(c);
        y
    };

    let mut basis = DMatrix::<f64>::zeros(p, p);
    basis[(p - 1, 0)] = 1.0;
    let mut chosen = Vec::with_capacity(p);
    for (i, w) in directions.iter().enumerate() {
        let pinv = basis
            .clone()
            .pseudo_inverse(PINV_EPS)
            .map_err(|e| Error::DegenerateData(e.to_string()))?;
        let f = w - &basis * (pinv * w);
        let norm = f.norm();
        if norm < 1e-12 {
            return Err(Error::DegenerateData(format!("no direction orthogonal to endmembers at step {i}")));
        }
        let f = f / norm;
        let v = f.transpose() * &y;
        let idx = argmax_abs(v.iter().cloned());
        basis.set_column(i, &y.column(idx));
        chosen.push(idx);
    }
    Ok(chosen)
}

/// Extracts `p` endmembers from `cube`; every signature is a cube pixel.
pub fn vca_extract(cube: &HyperCube, p: usize, seed: u64) -> Result<EndmemberSet> {
    let pixels = cube.pixels();
    let idx = vca_select(pixels, p, seed)?;
    let mut signatures = ndarray::Array2::zeros((p, cube.bands()));
    for (row, &i) in idx.iter().enumerate() {
        signatures.row_mut(row).assign(&pixels.row(i));
    }
    EndmemberSet::new(default_names(p), cube.wavelengths().to_vec(), signatures, None)
}

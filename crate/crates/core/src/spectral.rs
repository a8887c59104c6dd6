//! Thin SVD of feature matrices and the spectral diagnostics built on it.

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};
use crate::scalar::Element;

const SVD_MAX_ITERATIONS: usize = 10_000;

/// `Z = U diag(sigma) V^T` with `U: N x r`, `V: d x r`, `r = min(N, d)`.
///
/// Singular values are non-increasing and zeros are kept, so two matrices
/// of the same shape always produce spectra of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition<T: Element = f64> {
    u: DMatrix<T>,
    sigma: Vec<T>,
    v: DMatrix<T>,
}

impl<T: Element> SpectralDecomposition<T> {
    /// Assembles a decomposition from parts, checking shapes and ordering
    /// but not orthonormality.
    pub fn from_parts(u: DMatrix<T>, sigma: Vec<T>, v: DMatrix<T>) -> Result<Self> {
        let r = sigma.len();
        if u.ncols() != r || v.ncols() != r {
            return Err(Error::Shape(format!(
                "U is {:?}, V is {:?}, spectrum has {r} entries",
                u.shape(),
                v.shape()
            )));
        }
        if sigma.iter().any(|&s| !(s >= T::zero())) {
            return Err(Error::Parameter("singular values must be >= 0".into()));
        }
        if sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Parameter(
                "singular values must be non-increasing".into(),
            ));
        }
        Ok(Self { u, sigma, v })
    }

    pub fn u(&self) -> &DMatrix<T> {
        &self.u
    }
    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }
    pub fn v(&self) -> &DMatrix<T> {
        &self.v
    }
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma_f64(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s.to_wide()).collect()
    }

    /// `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> DMatrix<T> {
        self.reconstruct_top(self.rank())
    }

    /// Sum of the `k` leading rank-one terms.
    pub fn reconstruct_top(&self, k: usize) -> DMatrix<T> {
        let k = k.min(self.rank());
        reconstruct_with(
            &self.u.columns(0, k).into_owned(),
            &self.sigma[..k],
            &self.v.columns(0, k).into_owned(),
        )
    }

    /// Flips matched `(U, V)` column pairs; the reconstruction is unchanged.
    pub fn flip_signs(&mut self, columns: &[usize]) {
        for &c in columns {
            self.u.column_mut(c).neg_mut();
            self.v.column_mut(c).neg_mut();
        }
    }
}

/// `U diag(sigma) V^T` for arbitrary conforming parts.
pub fn reconstruct_with<T: Element>(u: &DMatrix<T>, sigma: &[T], v: &DMatrix<T>) -> DMatrix<T> {
    let mut scaled = u.clone();
    for (mut col, &s) in scaled.column_iter_mut().zip(sigma) {
        col *= s;
    }
    scaled * v.transpose()
}

pub fn svd<T: Element>(z: &DMatrix<T>) -> Result<SpectralDecomposition<T>> {
    let (rows, cols) = z.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidSize(format!(
            "cannot decompose a {rows}x{cols} matrix"
        )));
    }
    if let Some(index) = z.iter().position(|x| !x.is_finite()) {
        // nalgebra storage is column-major; report the row-major index.
        let (col, row) = (index / rows, index % rows);
        return Err(Error::NonFinite {
            index: row * cols + col,
        });
    }
    let dec = SVD::try_new(
        z.clone(),
        true,
        true,
        T::default_epsilon(),
        SVD_MAX_ITERATIONS,
    )
    .ok_or(Error::SvdConvergence { rows, cols })?;
    let u = dec.u.ok_or(Error::SvdConvergence { rows, cols })?;
    let v = dec
        .v_t
        .ok_or(Error::SvdConvergence { rows, cols })?
        .transpose();
    let sigma: Vec<T> = dec.singular_values.iter().copied().collect();
    let mut out = SpectralDecomposition { u, sigma, v };
    canonicalize_signs(&mut out);
    Ok(out)
}

// The largest-magnitude entry of every U column is made positive, so the
// factors are reproducible across equal inputs.
fn canonicalize_signs<T: Element>(dec: &mut SpectralDecomposition<T>) {
    let flips: Vec<usize> = dec
        .u
        .column_iter()
        .enumerate()
        .filter_map(|(c, col)| {
            let mut best = T::zero();
            for &x in col.iter() {
                if x.abs() > best.abs() {
                    best = x;
                }
            }
            (best < T::zero()).then_some(c)
        })
        .collect();
    dec.flip_signs(&flips);
}

fn check_spectrum(sigma: &[f64]) -> Result<f64> {
    if let Some(index) = sigma.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if sigma.iter().any(|&s| s < 0.0) {
        return Err(Error::Parameter("spectrum has a negative entry".into()));
    }
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedSpectrum);
    }
    Ok(total)
}

/// `p_i = sigma_i / sum_j sigma_j`.
pub fn normalized_spectrum(sigma: &[f64]) -> Result<Vec<f64>> {
    let total = check_spectrum(sigma)?;
    Ok(sigma.iter().map(|s| s / total).collect())
}

/// `exp(-sum_i p_i ln p_i)` over the normalized spectrum, with `0 ln 0 = 0`.
///
/// The result is clamped to `[1, #positive entries]` to absorb rounding.
pub fn effective_rank(sigma: &[f64]) -> Result<f64> {
    let p = normalized_spectrum(sigma)?;
    let entropy: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    let positive = sigma.iter().filter(|&&s| s > 0.0).count() as f64;
    Ok(entropy.exp().clamp(1.0, positive))
}

/// Effective rank of a matrix's singular spectrum.
pub fn matrix_effective_rank<T: Element>(z: &DMatrix<T>) -> Result<f64> {
    effective_rank(&svd(z)?.sigma_f64())
}

/// Number of leading components kept for a rank fraction:
/// `max(1, round(keep_fraction * r))`, halves rounding up.
pub fn retained_rank(rank: usize, keep_fraction: f64) -> Result<usize> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if rank == 0 {
        return Err(Error::InvalidSize("empty spectrum".into()));
    }
    let k = (keep_fraction * rank as f64).round() as usize;
    Ok(k.clamp(1, rank))
}

pub fn truncate_reconstruct<T: Element>(
    dec: &SpectralDecomposition<T>,
    keep_fraction: f64,
) -> Result<DMatrix<T>> {
    let k = retained_rank(dec.rank(), keep_fraction)?;
    Ok(dec.reconstruct_top(k))
}

/// Frobenius error of the best rank-`k` approximation, `sqrt(sum_{i>k} sigma_i^2)`.
pub fn tail_norm(sigma: &[f64], k: usize) -> f64 {
    sigma.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

pub fn frobenius<T: Element>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|x| x.to_wide().powi(2)).sum::<f64>().sqrt()
}

/// `||a - b||_F`, computed in f64.
pub fn frobenius_distance<T: Element>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.to_wide() - y.to_wide()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `||a - b||_F / ||b||_F`, or the absolute error when `b` is zero.
pub fn relative_frobenius_error<T: Element>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    let diff = frobenius_distance(a, b);
    let scale = frobenius(b);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// `max |M^T M - I|`, computed in f64.
pub fn orthonormality_defect<T: Element>(m: &DMatrix<T>) -> f64 {
    let wide = m.map(|x| x.to_wide());
    let gram = wide.transpose() * &wide;
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

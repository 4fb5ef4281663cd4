//! Dense complex linear-algebra kernel.
//!
//! Everything operates on [`CMat`]/[`CVec`] (row-major `ndarray` arrays of
//! `Complex64`). Eigen-based routines go through LAPACK; the matrix
//! exponential falls back to scaling-and-squaring for non-normal inputs.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Eigh, Inverse, UPLO};
use thiserror::Error;

pub use num_complex::Complex64 as C64;

pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (max |M - M^dag| = {0:.3e})")]
    NotHermitian(f64),
    #[error("eigenvalue {0:.6e} below the PSD clamp tolerance")]
    NegativeEigenvalue(f64),
    #[error("LAPACK backend error: {0}")]
    Backend(#[from] ndarray_linalg::error::LinalgError),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Hermiticity check tolerance for flagged matrices.
pub const HERMITICITY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-PSD_CLAMP, 0)` are treated as float noise and clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(n: usize) -> CMat {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { cr(1.0) } else { cr(0.0) })
}

pub fn zeros(rows: usize, cols: usize) -> CMat {
    Array2::from_elem((rows, cols), cr(0.0))
}

/// Conjugate transpose.
pub fn dagger(m: &CMat) -> CMat {
    m.t().mapv(|z| z.conj())
}

/// Max elementwise deviation from Hermiticity.
pub fn hermiticity_error(m: &CMat) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

pub fn is_hermitian(m: &CMat, tol: f64) -> bool {
    hermiticity_error(m) <= tol
}


/// Hermitian eigendecomposition `(w, V)` with eigenvectors as columns of `V`,
/// satisfying `M = V diag(w) V^dag`.
///
/// The LAPACK binding hands row-major input to the column-major driver
/// untransposed, so it actually diagonalizes `M^T = M*` and returns
/// conjugated eigenvectors; this wrapper conjugates them back. All Hermitian
/// eigen-solves in the crate must go through here.
pub fn eigh(m: &CMat) -> Result<(Array1<f64>, CMat)> {
    let (w, v) = Eigh::eigh(m, UPLO::Lower)?;
    Ok((w, v.mapv(|z| z.conj())))
}

fn require_square(m: &CMat) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NonSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

/// Euclidean norm of a state vector.
pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Normalize in place; returns the norm prior to scaling.
pub fn normalize(v: &mut CVec) -> f64 {
    let n = vec_norm(v);
    if n > 0.0 {
        v.mapv_inplace(|z| z / n);
    }
    n
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    ndarray::linalg::kron(a, b)
}

/// Principal square root of a Hermitian PSD matrix via eigendecomposition.
///
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero so that square roots of
/// operators like `1 - gamma*dt*LdagL` survive float noise; anything more
/// negative is reported as [`LinalgError::NegativeEigenvalue`], which
/// upstream means the time step is too large for the channel.
pub fn hermitian_sqrt(m: &CMat) -> Result<CMat> {
    require_square(m)?;
    let herr = hermiticity_error(m);
    if herr > HERMITICITY_TOL.max(1e-12 * matrix_scale(m)) {
        return Err(LinalgError::NotHermitian(herr));
    }
    let (mut w, v) = eigh(m)?;
    for lam in w.iter_mut() {
        if *lam < -PSD_CLAMP {
            return Err(LinalgError::NegativeEigenvalue(*lam));
        }
        if *lam < 0.0 {
            *lam = 0.0;
        }
    }
    let sqrt_w: Vec<f64> = w.iter().map(|lam| lam.sqrt()).collect();
    Ok(reconstruct_real_spectrum(&v, &sqrt_w))
}

/// `V diag(f) V^dag` for a unitary eigenbasis `V` and real spectrum values.
fn reconstruct_real_spectrum(v: &CMat, f: &[f64]) -> CMat {
    let scaled = scale_columns(v, |k| cr(f[k]));
    scaled.dot(&dagger(v))
}

fn scale_columns(v: &CMat, f: impl Fn(usize) -> C64) -> CMat {
    let mut out = v.clone();
    for (k, mut col) in out.columns_mut().into_iter().enumerate() {
        let s = f(k);
        col.mapv_inplace(|z| z * s);
    }
    out
}

fn matrix_scale(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0)
}

/// Matrix exponential.
///
/// Hermitian and anti-Hermitian inputs (every propagator generator in this
/// crate) take the eigendecomposition path; anything else goes through
/// scaling-and-squaring on a Taylor series summed to machine precision.
pub fn matrix_exp(m: &CMat) -> Result<CMat> {
    let n = require_square(m)?;
    if n == 0 {
        return Ok(m.clone());
    }
    let scale = matrix_scale(m);
    let tol = 1e-13 * scale.max(1.0);
    if hermiticity_error(m) <= tol {
        let (w, v) = eigh(m)?;
        let f: Vec<f64> = w.iter().map(|lam| lam.exp()).collect();
        return Ok(reconstruct_real_spectrum(&v, &f));
    }
    // m anti-Hermitian <=> i*m Hermitian; then exp(m) = V diag(e^{-i w}) V^dag
    let im = m.mapv(|z| z * c(0.0, 1.0));
    if hermiticity_error(&im) <= tol {
        let (w, v) = eigh(&im)?;
        let scaled = scale_columns(&v, |k| c(0.0, -w[k]).exp());
        return Ok(scaled.dot(&dagger(&v)));
    }
    Ok(exp_scaling_squaring(m))
}

fn exp_scaling_squaring(m: &CMat) -> CMat {
    let n = m.nrows();
    // max row sum (induced 1-norm of the transpose; any norm works for scaling)
    let norm = (0..n)
        .map(|i| m.row(i).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let t = m.mapv(|z| z / cr(2f64.powi(squarings as i32)));
    let mut result = identity(n);
    let mut term = identity(n);
    let mut k = 1u64;
    loop {
        term = term.dot(&t).mapv(|z| z / cr(k as f64));
        let term_norm: f64 = term.iter().map(|z| z.norm()).fold(0.0, f64::max);
        result += &term;
        if term_norm < 1e-18 || k > 200 {
            break;
        }
        k += 1;
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

/// Singular values in descending order.
pub fn singular_values(m: &CMat) -> Result<Array1<f64>> {
    // sigma(M) = sqrt(eig(M^dag M)); avoids the LAPACK SVD driver entirely
    // and is plenty accurate at the dimensions used here.
    let gram = dagger(m).dot(m);
    let (w, _) = Eigh::eigh(&gram, UPLO::Lower)?;  // eigenvalues only; conjugation is irrelevant
    let mut s: Vec<f64> = w.iter().map(|lam| lam.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(Array1::from(s))
}

/// Trace norm (sum of singular values).
pub fn trace_norm(m: &CMat) -> Result<f64> {
    require_square(m)?;
    Ok(singular_values(m)?.sum())
}

/// Spectral norm (largest singular value); zero for empty input.
pub fn spectral_norm(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m)
        .map(|s| s.first().copied().unwrap_or(0.0))
        .unwrap_or(f64::NAN)
}

pub fn trace(m: &CMat) -> C64 {
    m.diag().sum()
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMat) -> Result<f64> {
    require_square(m)?;
    let (w, _) = Eigh::eigh(m, UPLO::Lower)?;  // eigenvalues only
    Ok(w.iter().copied().fold(f64::INFINITY, f64::min))
}

/// `|v><v|` outer product.
pub fn outer(v: &CVec) -> CMat {
    let n = v.len();
    Array2::from_shape_fn((n, n), |(i, j)| v[i] * v[j].conj())
}

/// General eigendecomposition `(eigenvalues, V, V^-1)` of a square matrix,
/// plus the relative reconstruction error of `V diag(w) V^-1`.
pub fn eig_general(m: &CMat) -> Result<(CVec, CMat, CMat, f64)> {
    require_square(m)?;
    let (w, v) = m.eig()?;
    let v_inv = v.inv()?;
    let recon = scale_columns(&v, |k| w[k]).dot(&v_inv);
    let diff = &recon - m;
    let num: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1e-300);
    Ok((w, v, v_inv, num / den))
}

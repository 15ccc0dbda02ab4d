//! Dense linear-algebra kernels shared by every other module.
//!
//! Everything here is a pure function of its inputs. Symmetric
//! eigendecompositions come back with ascending eigenvalues and a fixed sign
//! convention on the eigenvectors so that downstream frequency indices and
//! sampling sets are reproducible bit for bit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry accepted by the symmetric kernels.
pub const SYMMETRY_TOL: f64 = 1e-10;

const SIGN_CANON_TOL: f64 = 1e-12;

/// Eigenvalues in ascending order with orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub values: Vector,
    pub vectors: Matrix,
}

impl EigenPair {
    /// Rebuilds `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|x| x)
    }

    fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        &scaled * self.vectors.transpose()
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub fn ensure_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m)?;
    let asymmetry = (m - m.transpose()).norm();
    if asymmetry > SYMMETRY_TOL * m.norm() {
        return Err(Error::NonSymmetric { asymmetry });
    }
    Ok(())
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn sym_eigendecompose(m: &Matrix) -> Result<EigenPair> {
    ensure_symmetric(m)?;
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });

    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = col.iter().find(|x| x.abs() > SIGN_CANON_TOL) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenPair { values, vectors })
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vector> {
    ensure_symmetric(m)?;
    let mut values: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(Vector::from_vec(values))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(sym_eigenvalues(m)?.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn singular_values(m: &Matrix) -> Result<Vector> {
    ensure_finite(m)?;
    if m.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let mut values: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(Vector::from_vec(values))
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.iter().copied().fold(0.0, f64::max))
}

/// Default rank-reveal cutoff `max(rows, cols) * eps`.
pub fn default_rtol(m: &Matrix) -> f64 {
    m.nrows().max(m.ncols()) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudoinverse; singular values at or below `rtol * s_max`
/// are treated as zero.
pub fn pseudo_inverse(m: &Matrix, rtol: f64) -> Result<Matrix> {
    ensure_finite(m)?;
    if rtol < 0.0 || !rtol.is_finite() {
        return Err(Error::InvalidParameter(format!("rtol must be >= 0, got {rtol}")));
    }
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::NonFinite);
    };
    let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rtol * s_max;
    let mut out = Matrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (v_t.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    Ok(out)
}

pub fn pseudo_inverse_default(m: &Matrix) -> Result<Matrix> {
    pseudo_inverse(m, default_rtol(m))
}

/// Numerical rank from singular values with cutoff `rtol * s_max`.
pub fn rank(m: &Matrix, rtol: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    let s_max = sv.iter().copied().fold(0.0, f64::max);
    if s_max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rtol * s_max).count())
}

/// `V diag(f(λ)) Vᵀ` for symmetric `M`.
pub fn spectral_apply(m: &Matrix, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    let eig = sym_eigendecompose(m)?;
    if eig.values.iter().any(|&l| !f(l).is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(eig.reconstruct_with(f))
}

/// Inverse of a symmetric positive definite matrix, `None` when the Cholesky
/// factorization fails.
pub fn spd_inverse(m: &Matrix) -> Option<Matrix> {
    let chol = symmetrize(m).cholesky()?;
    let inv = chol.inverse();
    inv.iter().all(|x| x.is_finite()).then(|| symmetrize(&inv))
}

/// Inverse for SPD input, falling back to the pseudoinverse when singular.
pub fn spd_inverse_or_pinv(m: &Matrix) -> Result<Matrix> {
    match spd_inverse(m) {
        Some(inv) => Ok(inv),
        None => Ok(symmetrize(&pseudo_inverse_default(m)?)),
    }
}

/// Symmetric square root of a PSD matrix; negative eigenvalues (round-off)
/// are clamped to zero.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eigendecompose(m)?;
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Errors with `NonPsd` when the smallest eigenvalue is below
/// `-tol * max(1, ‖M‖)`.
pub fn ensure_psd(m: &Matrix, tol: f64) -> Result<()> {
    let values = sym_eigenvalues(m)?;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max_abs = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if min < -tol * max_abs.max(1.0) {
        return Err(Error::NonPsd { min_eigenvalue: min });
    }
    Ok(())
}

/// Vertical stack of equally wide blocks.
pub fn vstack(blocks: &[Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    out
}

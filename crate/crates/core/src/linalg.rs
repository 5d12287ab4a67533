//! Small dense complex linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{DoaError, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;
pub type RMatrix = DMatrix<f64>;

/// Condition number above which a steering matrix is treated as rank deficient.
pub const MAX_STEERING_CONDITION: f64 = 1e8;

#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// `(X + X^H) / 2`; exact no-op on an already Hermitian matrix.
pub fn hermitian_part(x: &CMatrix) -> CMatrix {
    let n = x.nrows();
    let mut out = x.clone();
    for i in 0..n {
        out[(i, i)] = c64(x[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let v = (x[(i, j)] + x[(j, i)].conj()) * 0.5;
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    out
}

/// Largest entrywise deviation from Hermitian symmetry.
pub fn hermitian_residual(x: &CMatrix) -> f64 {
    let n = x.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((x[(i, j)] - x[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn trace(x: &CMatrix) -> Complex64 {
    x.diagonal().iter().sum()
}

pub fn frobenius(x: &CMatrix) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn is_finite(x: &CMatrix) -> bool {
    x.iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// Hermitian eigendecomposition with eigenvalues sorted ascending and the
/// eigenvector columns permuted to match.
pub fn hermitian_eigen(x: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let n = x.nrows();
    if !is_finite(x) {
        return Err(DoaError::NonFinite("covariance matrix"));
    }
    let eig = SymmetricEigen::try_new(x.clone(), f64::EPSILON, 10_000).ok_or_else(|| {
        DoaError::EigenSolver {
            dimension: n,
            frobenius_norm: frobenius(x),
            hermitian_residual: hermitian_residual(x),
        }
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Hermitian eigenvalues only, ascending.
pub fn hermitian_eigenvalues(x: &CMatrix) -> Result<Vec<f64>> {
    Ok(hermitian_eigen(x)?.0)
}

/// Orthogonal projector and Gram inverse of the column space of a tall matrix.
#[derive(Debug, Clone)]
pub struct ColumnSpace {
    pub gram_inverse: CMatrix,
    pub projector: CMatrix,
}

impl ColumnSpace {
    /// Fails when the spectral condition number of `a` exceeds
    /// [`MAX_STEERING_CONDITION`].
    pub fn new(a: &CMatrix) -> Result<Self> {
        let gram = hermitian_part(&(a.adjoint() * a));
        let eigs = hermitian_eigenvalues(&gram)?;
        let (lo, hi) = (eigs[0], eigs[eigs.len() - 1]);
        let condition = if lo <= 0.0 { f64::INFINITY } else { (hi / lo).sqrt() };
        if !(condition <= MAX_STEERING_CONDITION) {
            return Err(DoaError::IllConditioned { condition });
        }
        let gram_inverse = gram
            .cholesky()
            .ok_or(DoaError::IllConditioned { condition })?
            .inverse();
        let projector = hermitian_part(&(a * &gram_inverse * a.adjoint()));
        Ok(Self {
            gram_inverse,
            projector,
        })
    }
}

/// The exchange (anti-identity) matrix.
pub fn exchange(n: usize) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| {
        if i + j + 1 == n {
            c64(1.0, 0.0)
        } else {
            c64(0.0, 0.0)
        }
    })
}

/// Outer product `u v^H`.
pub fn outer(u: &CVector, v: &CVector) -> CMatrix {
    u * v.adjoint()
}

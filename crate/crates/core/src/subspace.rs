//! Covariance estimation and eigen-subspace extraction.

use crate::array_model::SnapshotSet;
use crate::error::{DoaError, Result};
use crate::linalg::{c64, hermitian_eigen, hermitian_part, CMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    Sample,
    ForwardBackward,
    ModifiedStep2,
}

/// A Hermitian covariance estimate tagged with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    matrix: CMatrix,
    kind: CovarianceKind,
}

impl CovarianceEstimate {
    /// Symmetrizes `matrix` on construction.
    pub fn new(matrix: &CMatrix, kind: CovarianceKind) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(DoaError::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if !crate::linalg::is_finite(matrix) {
            return Err(DoaError::NonFinite("covariance matrix"));
        }
        Ok(Self {
            matrix: hermitian_part(matrix),
            kind,
        })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }
}

/// `(1/N) sum x(t) x(t)^H`.
pub fn sample_covariance(snapshots: &SnapshotSet) -> Result<CovarianceEstimate> {
    let x = snapshots.data();
    let n = x.ncols();
    if n == 0 {
        return Err(DoaError::EmptySnapshots);
    }
    let r = x * x.adjoint() / c64(n as f64, 0.0);
    CovarianceEstimate::new(&r, CovarianceKind::Sample)
}

/// `(R + J R^* J) / 2`.
pub fn forward_backward_matrix(r: &CMatrix) -> CMatrix {
    let m = r.nrows();
    let mut out = r.clone();
    for i in 0..m {
        for j in 0..m {
            out[(i, j)] = (r[(i, j)] + r[(m - 1 - i, m - 1 - j)].conj()) * 0.5;
        }
    }
    hermitian_part(&out)
}

pub fn forward_backward_average(estimate: &CovarianceEstimate) -> CovarianceEstimate {
    CovarianceEstimate {
        matrix: forward_backward_matrix(estimate.matrix()),
        kind: CovarianceKind::ForwardBackward,
    }
}

/// Split eigen-structure of a covariance estimate for a K-source model.
#[derive(Debug, Clone)]
pub struct SubspaceDecomposition {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub noise_basis: CMatrix,
    pub signal_basis: CMatrix,
    pub signal_projector: CMatrix,
    pub noise_projector: CMatrix,
}

impl SubspaceDecomposition {
    pub fn num_sources(&self) -> usize {
        self.signal_basis.ncols()
    }
}

pub fn eigendecompose_matrix(r: &CMatrix, k: usize) -> Result<SubspaceDecomposition> {
    let m = r.nrows();
    if k == 0 || k >= m {
        return Err(DoaError::DimensionMismatch(format!(
            "need 1 <= K < M, got K={k}, M={m}"
        )));
    }
    let (eigenvalues, vectors) = hermitian_eigen(r)?;
    let noise_basis = vectors.columns(0, m - k).into_owned();
    let signal_basis = vectors.columns(m - k, k).into_owned();
    let signal_projector = hermitian_part(&(&signal_basis * signal_basis.adjoint()));
    let noise_projector = hermitian_part(&(&noise_basis * noise_basis.adjoint()));
    Ok(SubspaceDecomposition {
        eigenvalues,
        noise_basis,
        signal_basis,
        signal_projector,
        noise_projector,
    })
}

pub fn eigendecompose(estimate: &CovarianceEstimate, k: usize) -> Result<SubspaceDecomposition> {
    eigendecompose_matrix(estimate.matrix(), k)
}

/// Largest entrywise deviation of `B^H B` from the identity.
pub fn orthonormality_deviation(basis: &CMatrix) -> f64 {
    let gram = basis.adjoint() * basis;
    let l = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..l {
        for j in 0..l {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - c64(target, 0.0)).norm());
        }
    }
    worst
}

/// `B B^H` for a basis with orthonormal columns.
pub fn projector(basis: &CMatrix) -> Result<CMatrix> {
    let deviation = orthonormality_deviation(basis);
    if !(deviation <= 1e-8) {
        return Err(DoaError::NotOrthonormal { deviation });
    }
    Ok(hermitian_part(&(basis * basis.adjoint())))
}

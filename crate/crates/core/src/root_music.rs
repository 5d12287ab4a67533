//! The root-MUSIC pipeline: null-spectrum polynomial, rooting, selection of
//! the roots closest to the unit circle, and conversion to DOAs.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::array_model::ArrayGeometry;
use crate::error::{DoaError, Result};
use crate::linalg::{c64, CMatrix};
use crate::subspace::{eigendecompose_matrix, orthonormality_deviation};

pub use crate::polyroots::polynomial_roots;

/// Roots within this distance outside the unit circle count as inside.
pub const INSIDE_TOLERANCE: f64 = 1e-8;
const PAIRING_TOLERANCE: f64 = 1e-2;

/// The `M-1` roots of the null-spectrum polynomial kept inside the unit
/// circle, sorted by descending magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct RootSet {
    roots: Vec<Complex64>,
}

impl RootSet {
    /// Sorts by descending magnitude, ties broken by angle for determinism.
    pub fn new(mut roots: Vec<Complex64>) -> Self {
        roots.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(a.arg().total_cmp(&b.arg())));
        Self { roots }
    }

    pub fn roots(&self) -> &[Complex64] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.roots.iter().map(|z| z.norm()).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.roots.iter().map(|z| z.arg()).collect()
    }

    /// The first `k` roots, i.e. the conventional signal-root picks.
    pub fn closest(&self, k: usize) -> &[Complex64] {
        &self.roots[..k.min(self.roots.len())]
    }

    pub fn pick(&self, indices: &[usize]) -> Vec<Complex64> {
        indices.iter().map(|&i| self.roots[i]).collect()
    }
}

/// Ascending DOA estimates with the roots they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    thetas: Vec<f64>,
    source_roots: Vec<Complex64>,
}

impl DoaEstimate {
    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn source_roots(&self) -> &[Complex64] {
        &self.source_roots
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.thetas.iter().map(|t| t.to_degrees()).collect()
    }

    /// Two selected roots mapping to the same angle (typically after
    /// clamping at endfire).
    pub fn has_duplicates(&self) -> bool {
        self.thetas.windows(2).any(|w| w[0] == w[1])
    }
}

/// Coefficients (ascending in `z`, length `2M-1`) of
/// `z^(M-1) a^H(z) G G^H a(z)`: entry `l + M - 1` is the sum of the `l`-th
/// diagonal (`row - col = l`) of `G G^H`.
pub fn null_spectrum_polynomial(noise_basis: &CMatrix) -> Result<Vec<Complex64>> {
    let m = noise_basis.nrows();
    if noise_basis.ncols() == 0 || noise_basis.ncols() >= m {
        return Err(DoaError::DimensionMismatch(format!(
            "noise basis must be M x L with 1 <= L < M, got {}x{}",
            m,
            noise_basis.ncols()
        )));
    }
    let deviation = orthonormality_deviation(noise_basis);
    if !(deviation <= 1e-8) {
        return Err(DoaError::NotOrthonormal { deviation });
    }
    Ok(projector_polynomial(&(noise_basis * noise_basis.adjoint())))
}

/// Polynomial coefficients for an arbitrary Hermitian weight matrix `C`,
/// with exact conjugate symmetry imposed.
pub fn projector_polynomial(c: &CMatrix) -> Vec<Complex64> {
    let m = c.nrows();
    let mut coefficients = vec![c64(0.0, 0.0); 2 * m - 1];
    for l in 0..m {
        let mut sum = c64(0.0, 0.0);
        for col in 0..(m - l) {
            sum += c[(col + l, col)];
        }
        coefficients[m - 1 + l] = sum;
    }
    coefficients[m - 1].im = 0.0;
    for l in 1..m {
        coefficients[m - 1 - l] = coefficients[m - 1 + l].conj();
    }
    coefficients
}

/// Pairs roots into conjugate-reciprocal pairs and keeps the smaller member
/// of each. Returns the inside set and its `k` roots closest to the circle.
pub fn select_inside_and_closest(roots: &[Complex64], k: usize) -> Result<(RootSet, Vec<Complex64>)> {
    let n = roots.len();
    if n % 2 != 0 || n == 0 {
        return Err(DoaError::DimensionMismatch(format!(
            "expected an even, nonzero number of roots, got {n}"
        )));
    }
    finish_selection(pair_inside(roots)?, k)
}

fn finish_selection(inside: Vec<Complex64>, k: usize) -> Result<(RootSet, Vec<Complex64>)> {
    if k == 0 || k > inside.len() {
        return Err(DoaError::DimensionMismatch(format!(
            "cannot select {k} roots out of {}",
            inside.len()
        )));
    }
    let set = RootSet::new(inside);
    let selected = set.closest(k).to_vec();
    Ok((set, selected))
}

fn pair_inside(roots: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = roots.len();
    let mut costs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            costs.push(((roots[i] * roots[j].conj() - 1.0).norm(), i, j));
        }
    }
    costs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; n];
    let mut inside = Vec::with_capacity(n / 2);
    let mut worst = 0.0f64;
    for (cost, i, j) in costs {
        if inside.len() == n / 2 {
            break;
        }
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        worst = worst.max(cost);
        inside.push(if roots[i].norm() <= roots[j].norm() { roots[i] } else { roots[j] });
    }
    if worst > PAIRING_TOLERANCE {
        return Err(DoaError::RootPairing { mismatch: worst });
    }
    if let Some(z) = inside.iter().find(|z| z.norm() > 1.0 + PAIRING_TOLERANCE) {
        return Err(DoaError::RootPairing { mismatch: z.norm() - 1.0 });
    }
    Ok(inside)
}

/// `theta = asin(clamp(arg(z) / (2 pi d/lambda), -1, 1))`.
pub fn root_to_theta(z: Complex64, geometry: &ArrayGeometry) -> f64 {
    let s = z.arg() / (2.0 * PI * geometry.spacing_ratio());
    s.clamp(-1.0, 1.0).asin()
}

pub fn roots_to_doas(selected: &[Complex64], geometry: &ArrayGeometry) -> DoaEstimate {
    let mut pairs: Vec<(f64, Complex64)> = selected
        .iter()
        .map(|&z| (root_to_theta(z, geometry), z))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    DoaEstimate {
        thetas: pairs.iter().map(|p| p.0).collect(),
        source_roots: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Inside-circle roots of the null-spectrum polynomial of a noise basis.
pub fn noise_basis_roots(noise_basis: &CMatrix, k: usize) -> Result<RootSet> {
    let coefficients = null_spectrum_polynomial(noise_basis)?;
    Ok(inside_roots(&coefficients, k)?.0)
}

/// Roots and selection for a conjugate-symmetric coefficient vector of
/// length `2M-1`. Vanishing outer coefficient pairs (e.g. a diagonal weight
/// matrix) stand for roots at zero and infinity; the zeros join the inside
/// set and only the central polynomial is rooted.
fn inside_roots(coefficients: &[Complex64], k: usize) -> Result<(RootSet, Vec<Complex64>)> {
    let centre = coefficients.len() / 2;
    let scale = coefficients.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut half = centre;
    while half > 0 && coefficients[centre + half].norm() <= 1e-14 * scale {
        half -= 1;
    }
    let mut inside = if half > 0 {
        pair_inside(&polynomial_roots(&coefficients[centre - half..=centre + half])?)?
    } else {
        Vec::new()
    };
    inside.extend(std::iter::repeat_n(c64(0.0, 0.0), centre - half));
    finish_selection(inside, k)
}

/// Root-MUSIC from a noise-subspace projector `C` (any Hermitian weight).
pub fn root_music_from_projector(
    noise_projector: &CMatrix,
    k: usize,
    geometry: &ArrayGeometry,
) -> Result<(DoaEstimate, RootSet)> {
    let coefficients = projector_polynomial(noise_projector);
    let (set, selected) = inside_roots(&coefficients, k)?;
    Ok((roots_to_doas(&selected, geometry), set))
}

/// Conventional root-MUSIC on a covariance matrix.
pub fn root_music(covariance: &CMatrix, k: usize, geometry: &ArrayGeometry) -> Result<(DoaEstimate, RootSet)> {
    if covariance.nrows() != geometry.num_sensors() {
        return Err(DoaError::DimensionMismatch(format!(
            "covariance is {}x{}, array has {} sensors",
            covariance.nrows(),
            covariance.ncols(),
            geometry.num_sensors()
        )));
    }
    let decomposition = eigendecompose_matrix(covariance, k)?;
    let set = noise_basis_roots(&decomposition.noise_basis, k)?;
    Ok((roots_to_doas(set.closest(k), geometry), set))
}

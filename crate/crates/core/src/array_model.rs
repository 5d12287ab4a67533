//! Ground-truth generative model of a uniform linear array: steering
//! vectors, exact covariance and subspaces, and seeded snapshot synthesis.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DoaError, Result};
use crate::linalg::{c64, hermitian_eigen, hermitian_part, hermitian_residual, CMatrix, CVector};
use crate::root_music::{null_spectrum_polynomial, polynomial_roots, select_inside_and_closest, RootSet};

/// A uniform linear array of `num_sensors` elements spaced `spacing_ratio`
/// wavelengths apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    num_sensors: usize,
    spacing_ratio: f64,
}

impl ArrayGeometry {
    pub fn new(num_sensors: usize, spacing_ratio: f64) -> Result<Self> {
        if num_sensors < 2 {
            return Err(DoaError::InvalidGeometry(format!(
                "need at least 2 sensors, got {num_sensors}"
            )));
        }
        if !(spacing_ratio > 0.0 && spacing_ratio <= 0.5) {
            return Err(DoaError::InvalidGeometry(format!(
                "spacing ratio d/lambda must lie in (0, 0.5], got {spacing_ratio}"
            )));
        }
        Ok(Self {
            num_sensors,
            spacing_ratio,
        })
    }

    pub fn num_sensors(&self) -> usize {
        self.num_sensors
    }

    pub fn spacing_ratio(&self) -> f64 {
        self.spacing_ratio
    }

    /// Electrical angle `2 pi (d/lambda) sin(theta)`.
    pub fn omega(&self, theta: f64) -> f64 {
        2.0 * PI * self.spacing_ratio * theta.sin()
    }

    fn check_angle(theta: f64) -> Result<()> {
        if theta.is_finite() && theta.abs() <= FRAC_PI_2 {
            Ok(())
        } else {
            Err(DoaError::AngleOutOfRange(theta))
        }
    }

    /// `a(theta)`, entry `m` equal to `exp(-j m omega)`.
    pub fn steering_vector(&self, theta: f64) -> Result<CVector> {
        Self::check_angle(theta)?;
        Ok(self.steering_from_omega(self.omega(theta)))
    }

    pub fn steering_from_omega(&self, omega: f64) -> CVector {
        CVector::from_fn(self.num_sensors, |m, _| {
            Complex64::from_polar(1.0, -(m as f64) * omega)
        })
    }

    /// `a^(1)(theta) = -[0, e^{-j w}, 2 e^{-j2w}, ...]^T`, so that
    /// `da/dw = j a^(1)`.
    pub fn steering_derivative(&self, theta: f64) -> Result<CVector> {
        Self::check_angle(theta)?;
        Ok(self.derivative_from_omega(self.omega(theta)))
    }

    pub fn derivative_from_omega(&self, omega: f64) -> CVector {
        CVector::from_fn(self.num_sensors, |m, _| {
            -(m as f64) * Complex64::from_polar(1.0, -(m as f64) * omega)
        })
    }

    /// Vandermonde steering matrix `[a(theta_1), ..., a(theta_K)]`.
    pub fn steering_matrix(&self, thetas: &[f64]) -> Result<CMatrix> {
        let mut a = CMatrix::zeros(self.num_sensors, thetas.len());
        for (k, &theta) in thetas.iter().enumerate() {
            a.set_column(k, &self.steering_vector(theta)?);
        }
        Ok(a)
    }
}

/// Ground-truth source configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceScenario {
    pub geometry: ArrayGeometry,
    doas: Vec<f64>,
    source_covariance: CMatrix,
    noise_power: f64,
    num_snapshots: usize,
}

impl SourceScenario {
    pub fn new(
        geometry: ArrayGeometry,
        doas: Vec<f64>,
        source_covariance: CMatrix,
        noise_power: f64,
        num_snapshots: usize,
    ) -> Result<Self> {
        let k = doas.len();
        let m = geometry.num_sensors();
        if k == 0 || k >= m {
            return Err(DoaError::InvalidScenario(format!(
                "need 1 <= K < M sources, got K={k}, M={m}"
            )));
        }
        for &theta in &doas {
            ArrayGeometry::check_angle(theta)?;
        }
        if doas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DoaError::InvalidScenario(
                "DOAs must be strictly ascending".into(),
            ));
        }
        if source_covariance.nrows() != k || source_covariance.ncols() != k {
            return Err(DoaError::DimensionMismatch(format!(
                "source covariance is {}x{}, expected {k}x{k}",
                source_covariance.nrows(),
                source_covariance.ncols()
            )));
        }
        let residual = hermitian_residual(&source_covariance);
        if residual > 1e-12 {
            return Err(DoaError::NotHermitian { residual });
        }
        let source_covariance = hermitian_part(&source_covariance);
        let min_eigenvalue = hermitian_eigen(&source_covariance)?.0[0];
        if min_eigenvalue < -1e-12 {
            return Err(DoaError::NotPositiveSemidefinite { min_eigenvalue });
        }
        if !(noise_power >= 0.0 && noise_power.is_finite()) {
            return Err(DoaError::InvalidScenario(format!(
                "noise power must be finite and non-negative, got {noise_power}"
            )));
        }
        if num_snapshots == 0 {
            return Err(DoaError::EmptySnapshots);
        }
        Ok(Self {
            geometry,
            doas,
            source_covariance,
            noise_power,
            num_snapshots,
        })
    }

    /// Unit noise power, equal source powers `10^(snr/10)` and pairwise
    /// correlation coefficient `r` between every pair of sources.
    pub fn equicorrelated(
        geometry: ArrayGeometry,
        doas: Vec<f64>,
        snr_db: f64,
        correlation: f64,
        num_snapshots: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&correlation) {
            return Err(DoaError::InvalidScenario(format!(
                "correlation coefficient must lie in [0, 1], got {correlation}"
            )));
        }
        let power = 10f64.powf(snr_db / 10.0);
        let k = doas.len();
        let s = CMatrix::from_fn(k, k, |i, j| {
            c64(if i == j { power } else { power * correlation }, 0.0)
        });
        Self::new(geometry, doas, s, 1.0, num_snapshots)
    }

    pub fn doas(&self) -> &[f64] {
        &self.doas
    }

    pub fn num_sources(&self) -> usize {
        self.doas.len()
    }

    pub fn source_covariance(&self) -> &CMatrix {
        &self.source_covariance
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    pub fn with_snapshots(&self, num_snapshots: usize) -> Result<Self> {
        if num_snapshots == 0 {
            return Err(DoaError::EmptySnapshots);
        }
        Ok(Self {
            num_snapshots,
            ..self.clone()
        })
    }

    pub fn steering_matrix(&self) -> CMatrix {
        self.geometry
            .steering_matrix(&self.doas)
            .expect("scenario DOAs are validated on construction")
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.doas.iter().map(|&t| self.geometry.omega(t)).collect()
    }
}

/// Array observations, column `t` holding snapshot `x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    data: CMatrix,
}

impl SnapshotSet {
    pub fn new(data: CMatrix) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(DoaError::EmptySnapshots);
        }
        if !crate::linalg::is_finite(&data) {
            return Err(DoaError::NonFinite("snapshot data"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &CMatrix {
        &self.data
    }

    pub fn num_sensors(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_snapshots(&self) -> usize {
        self.data.ncols()
    }
}

/// Exact model covariance `A S A^H + sigma^2 I`.
pub fn true_covariance(scenario: &SourceScenario) -> CMatrix {
    let a = scenario.steering_matrix();
    let m = scenario.geometry.num_sensors();
    let r = &a * scenario.source_covariance() * a.adjoint()
        + CMatrix::identity(m, m) * c64(scenario.noise_power(), 0.0);
    hermitian_part(&r)
}

/// Any `F` with `F F^H = S`: Cholesky when it succeeds, otherwise a
/// clipped eigen factor (covers singular `S`, e.g. fully coherent sources).
pub(crate) fn covariance_factor(s: &CMatrix) -> Result<CMatrix> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.l());
    }
    let (values, vectors) = hermitian_eigen(s)?;
    if values[0] < -1e-12 {
        return Err(DoaError::NotPositiveSemidefinite {
            min_eigenvalue: values[0],
        });
    }
    let k = s.nrows();
    Ok(CMatrix::from_fn(k, k, |i, j| {
        vectors[(i, j)] * values[j].max(0.0).sqrt()
    }))
}

/// Matrix of i.i.d. circular complex normals with unit variance.
pub(crate) fn unit_complex_normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
    let mut out = DMatrix::zeros(rows, cols);
    for t in 0..cols {
        for i in 0..rows {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            out[(i, t)] = c64(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2);
        }
    }
    out
}

/// Draws `x(t) = A s(t) + n(t)`, `s ~ N_C(0, S)`, `n ~ N_C(0, sigma^2 I)`.
/// Identical `(scenario, seed)` pairs give bit-identical output.
pub fn generate_snapshots(scenario: &SourceScenario, seed: u64) -> Result<SnapshotSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = scenario.geometry.num_sensors();
    let k = scenario.num_sources();
    let n = scenario.num_snapshots();
    let factor = covariance_factor(scenario.source_covariance())?;
    let sources = &factor * unit_complex_normals(&mut rng, k, n);
    let noise = unit_complex_normals(&mut rng, m, n) * c64(scenario.noise_power().sqrt(), 0.0);
    SnapshotSet::new(scenario.steering_matrix() * sources + noise)
}

/// Exact eigen-structure of the model covariance and derived quantities.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub geometry: ArrayGeometry,
    pub noise_power: f64,
    pub covariance: CMatrix,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub signal_basis: CMatrix,
    pub noise_basis: CMatrix,
    pub signal_projector: CMatrix,
    pub noise_projector: CMatrix,
    /// `R - sigma^2 I`.
    pub v_matrix: CMatrix,
    pub v_pseudoinverse: CMatrix,
    pub steering: CMatrix,
    /// Column `k` is `a^(1)` at source `k`.
    pub steering_derivatives: CMatrix,
    pub omegas: Vec<f64>,
    pub true_roots: RootSet,
}

impl TrueModel {
    pub fn num_sensors(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn num_sources(&self) -> usize {
        self.signal_basis.ncols()
    }

    /// Signal eigenvalues `lambda_{M-K+1} .. lambda_M`.
    pub fn signal_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues[self.num_sensors() - self.num_sources()..]
    }

    /// Magnitudes of the `M-K-1` true noise roots, largest first.
    pub fn noise_root_magnitudes(&self) -> Vec<f64> {
        self.true_roots.magnitudes()[self.num_sources()..].to_vec()
    }

    /// `V^dag R V^dag = sum lambda / (lambda - sigma^2)^2 e e^H`.
    pub fn vdag_r_vdag(&self) -> CMatrix {
        &self.v_pseudoinverse * &self.covariance * &self.v_pseudoinverse
    }
}

pub fn true_subspace_model(scenario: &SourceScenario) -> Result<TrueModel> {
    let m = scenario.geometry.num_sensors();
    let k = scenario.num_sources();
    let sigma2 = scenario.noise_power();
    let covariance = true_covariance(scenario);
    let (eigenvalues, vectors) = hermitian_eigen(&covariance)?;

    let gap = eigenvalues[m - k] - sigma2;
    if !(gap > 0.0 && gap > 1e-9 * sigma2) {
        return Err(DoaError::DegenerateSignalSubspace { gap });
    }

    let noise_basis = vectors.columns(0, m - k).into_owned();
    let signal_basis = vectors.columns(m - k, k).into_owned();
    let signal_projector = hermitian_part(&(&signal_basis * signal_basis.adjoint()));
    let noise_projector = hermitian_part(&(&noise_basis * noise_basis.adjoint()));
    let v_matrix = hermitian_part(&(&covariance - CMatrix::identity(m, m) * c64(sigma2, 0.0)));

    let mut v_pseudoinverse = CMatrix::zeros(m, m);
    for i in 0..k {
        let e = signal_basis.column(i);
        let w = 1.0 / (eigenvalues[m - k + i] - sigma2);
        v_pseudoinverse += e * e.adjoint() * c64(w, 0.0);
    }
    let v_pseudoinverse = hermitian_part(&v_pseudoinverse);

    let omegas = scenario.omegas();
    let steering = scenario.steering_matrix();
    let mut steering_derivatives = CMatrix::zeros(m, k);
    for (i, &w) in omegas.iter().enumerate() {
        steering_derivatives.set_column(i, &scenario.geometry.derivative_from_omega(w));
    }

    let coefficients = null_spectrum_polynomial(&noise_basis)?;
    let roots = polynomial_roots(&coefficients)?;
    let (true_roots, _) = select_inside_and_closest(&roots, k)?;

    Ok(TrueModel {
        geometry: scenario.geometry,
        noise_power: sigma2,
        covariance,
        eigenvalues,
        signal_basis,
        noise_basis,
        signal_projector,
        noise_projector,
        v_matrix,
        v_pseudoinverse,
        steering,
        steering_derivatives,
        omegas,
        true_roots,
    })
}

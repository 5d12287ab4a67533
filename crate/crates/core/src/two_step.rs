//! Two-step covariance modification: estimate DOAs, subtract a scaled
//! estimate of the signal-noise cross terms from the sample covariance,
//! and re-estimate, choosing the scale by the SML criterion.

use crate::array_model::{ArrayGeometry, SnapshotSet};
use crate::error::{DoaError, Result};
use crate::estimator::{DoaEstimator, Estimate, EstimationContext};
use crate::linalg::{c64, hermitian_eigenvalues, hermitian_part, trace, CMatrix, ColumnSpace};
use crate::subspace::{forward_backward_matrix, sample_covariance, CovarianceEstimate, CovarianceKind};

const LOG_FLOOR: f64 = 1e-300;

/// Least-squares source amplitudes `(A^H A)^-1 A^H x(t)` and residuals
/// `x(t) - A s(t)`.
pub fn ls_source_and_noise(snapshots: &SnapshotSet, steering: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    if steering.nrows() != snapshots.num_sensors() {
        return Err(DoaError::DimensionMismatch(format!(
            "steering matrix has {} rows, snapshots have {}",
            steering.nrows(),
            snapshots.num_sensors()
        )));
    }
    let space = ColumnSpace::new(steering)?;
    let amplitudes = &space.gram_inverse * steering.adjoint() * snapshots.data();
    let residuals = snapshots.data() - steering * &amplitudes;
    Ok((amplitudes, residuals))
}

/// `T = P_A R (I - P_A)` for the column space of `steering`.
pub fn cross_term(sample_cov: &CMatrix, steering: &CMatrix) -> Result<CMatrix> {
    let p = ColumnSpace::new(steering)?.projector;
    let m = p.nrows();
    let p_perp = CMatrix::identity(m, m) - &p;
    Ok(&p * sample_cov * p_perp)
}

/// `R - gamma (T + T^H)`.
pub fn modified_covariance(sample_cov: &CMatrix, t: &CMatrix, gamma: f64) -> Result<CovarianceEstimate> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DoaError::GammaOutOfRange(gamma));
    }
    let correction = hermitian_part(&(t + t.adjoint()));
    let r2 = if gamma == 0.0 {
        sample_cov.clone()
    } else {
        sample_cov - correction * c64(gamma, 0.0)
    };
    CovarianceEstimate::new(&r2, CovarianceKind::ModifiedStep2)
}

/// `ln det(P R P + Tr{P_perp R}/(M-K) P_perp)` with `P` the projector onto
/// the steering vectors of `thetas`.
///
/// With `Q` an orthonormal basis of the steering columns the argument is
/// block diagonal in `[Q, Q_perp]`, so its spectrum is that of the `K x K`
/// matrix `Q^H R Q` together with `M-K` copies of the scaled noise trace.
pub fn sml_objective(sample_cov: &CMatrix, thetas: &[f64], geometry: &ArrayGeometry) -> Result<f64> {
    let m = geometry.num_sensors();
    let k = thetas.len();
    if k == 0 || k >= m {
        return Err(DoaError::DimensionMismatch(format!(
            "SML needs 1 <= K < M, got K={k}, M={m}"
        )));
    }
    if sample_cov.nrows() != m || sample_cov.ncols() != m {
        return Err(DoaError::DimensionMismatch(format!(
            "covariance is {}x{}, array has {m} sensors",
            sample_cov.nrows(),
            sample_cov.ncols()
        )));
    }
    let a = geometry.steering_matrix(thetas)?;
    ColumnSpace::new(&a)?;
    let q = a.qr().q();
    let inner = hermitian_part(&(q.adjoint() * sample_cov * &q));
    let signal = hermitian_eigenvalues(&inner)?;
    let noise_level = (trace(sample_cov).re - trace(&inner).re) / (m - k) as f64;
    let value = signal.iter().map(|&l| l.max(LOG_FLOOR).ln()).sum::<f64>()
        + (m - k) as f64 * noise_level.max(LOG_FLOOR).ln();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DoaError::NonFinite("SML objective"))
    }
}

/// Where forward-backward averaging sits relative to the cross-term
/// subtraction when the base estimator uses it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbOrder {
    /// Average first, then modify the averaged matrix.
    Pre,
    /// Modify the raw sample covariance; the base estimator averages after.
    Post,
}

impl std::fmt::Display for FbOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FbOrder::Pre => "pre",
            FbOrder::Post => "post",
        })
    }
}

impl std::str::FromStr for FbOrder {
    type Err = DoaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(FbOrder::Pre),
            "post" => Ok(FbOrder::Post),
            other => Err(DoaError::InvalidConfig(format!(
                "fb_order must be 'pre' or 'post', got '{other}'"
            ))),
        }
    }
}

pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepConfig {
    gamma_grid: Vec<f64>,
    pub fb_order: FbOrder,
}

impl TwoStepConfig {
    /// The grid is sorted; it must lie in `[0, 1]`, contain 0 and have no
    /// repeated values.
    pub fn new(mut gamma_grid: Vec<f64>, fb_order: FbOrder) -> Result<Self> {
        if let Some(&g) = gamma_grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(DoaError::GammaOutOfRange(g));
        }
        gamma_grid.sort_by(f64::total_cmp);
        if gamma_grid.first() != Some(&0.0) {
            return Err(DoaError::InvalidGammaGrid("grid must contain 0".into()));
        }
        if gamma_grid.windows(2).any(|w| w[0] == w[1]) {
            return Err(DoaError::InvalidGammaGrid("grid has repeated values".into()));
        }
        Ok(Self { gamma_grid, fb_order })
    }

    pub fn gamma_grid(&self) -> &[f64] {
        &self.gamma_grid
    }
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        Self {
            gamma_grid: default_gamma_grid(),
            fb_order: FbOrder::Pre,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub step1: Estimate,
    pub step2: Estimate,
    pub chosen_gamma: f64,
    /// `(gamma, F_SML)` for every grid value that produced an estimate.
    pub sml_values: Vec<(f64, f64)>,
    pub modified_covariance: CovarianceEstimate,
    /// Grid values whose re-estimation or scoring failed.
    pub skipped: Vec<(f64, DoaError)>,
    /// Set when step 1 produced DOAs too close to form the cross term and
    /// the step-1 estimate was returned unchanged.
    pub fell_back: bool,
}

/// Runs the two-step procedure on `covariance`; SML scores use the raw
/// sample covariance held by `ctx`.
pub fn two_step_from_covariance(
    covariance: &CMatrix,
    ctx: &EstimationContext<'_>,
    config: &TwoStepConfig,
    base: &dyn DoaEstimator,
) -> Result<TwoStepResult> {
    let step1 = base.estimate(covariance, ctx)?;
    let working = if base.forward_backward() && config.fb_order == FbOrder::Pre {
        forward_backward_matrix(covariance)
    } else {
        covariance.clone()
    };

    let fallback = |step1: Estimate, working: &CMatrix| -> Result<TwoStepResult> {
        let sml_values = step1.sml.map(|f| vec![(0.0, f)]).unwrap_or_default();
        let mut step2 = step1.clone();
        step2.gamma = Some(0.0);
        Ok(TwoStepResult {
            step1,
            step2,
            chosen_gamma: 0.0,
            sml_values,
            modified_covariance: CovarianceEstimate::new(working, CovarianceKind::ModifiedStep2)?,
            skipped: Vec::new(),
            fell_back: true,
        })
    };

    if step1.doa.has_duplicates() {
        return fallback(step1, &working);
    }
    let steering = ctx.geometry.steering_matrix(step1.doa.thetas())?;
    let t = match cross_term(&working, &steering) {
        Ok(t) => t,
        Err(DoaError::IllConditioned { .. }) => return fallback(step1, &working),
        Err(e) => return Err(e),
    };

    let mut best: Option<(f64, f64, Estimate, CovarianceEstimate)> = None;
    let mut sml_values = Vec::with_capacity(config.gamma_grid.len());
    let mut skipped = Vec::new();
    for &gamma in &config.gamma_grid {
        let r2 = modified_covariance(&working, &t, gamma)?;
        let scored = base.estimate(r2.matrix(), ctx).and_then(|est| {
            let f = sml_objective(ctx.sample_covariance, est.doa.thetas(), &ctx.geometry)?;
            Ok((est, f))
        });
        match scored {
            Ok((mut est, f)) => {
                sml_values.push((gamma, f));
                if best.as_ref().is_none_or(|b| f < b.1) {
                    est.gamma = Some(gamma);
                    est.first_stage_projector = step1.signal_projector.clone();
                    est.sml = Some(f);
                    best = Some((gamma, f, est, r2));
                }
            }
            Err(e) => skipped.push((gamma, e)),
        }
    }
    match best {
        Some((chosen_gamma, _, step2, modified_covariance)) => Ok(TwoStepResult {
            step1,
            step2,
            chosen_gamma,
            sml_values,
            modified_covariance,
            skipped,
            fell_back: false,
        }),
        None => {
            let mut result = fallback(step1, &working)?;
            result.skipped = skipped;
            Ok(result)
        }
    }
}

/// Full two-step estimate from snapshots.
pub fn two_step_estimate(
    snapshots: &SnapshotSet,
    num_sources: usize,
    geometry: &ArrayGeometry,
    config: &TwoStepConfig,
    base: &dyn DoaEstimator,
) -> Result<TwoStepResult> {
    let r = sample_covariance(snapshots)?;
    let ctx = EstimationContext {
        sample_covariance: r.matrix(),
        snapshots,
        num_sources,
        geometry: *geometry,
        seed: 0,
    };
    two_step_from_covariance(r.matrix(), &ctx, config, base)
}

/// The two-step procedure as a composable estimator.
#[derive(Debug, Clone)]
pub struct TwoStepEstimator<E> {
    pub base: E,
    pub config: TwoStepConfig,
}

impl<E: DoaEstimator> DoaEstimator for TwoStepEstimator<E> {
    fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate> {
        Ok(two_step_from_covariance(covariance, ctx, &self.config, &self.base)?.step2)
    }

    fn forward_backward(&self) -> bool {
        self.base.forward_backward()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_model::{generate_snapshots, true_covariance, SourceScenario};
    use crate::estimator::RootMusicEstimator;
    use crate::leakage::empirical_leakage;
    use crate::array_model::true_subspace_model;
    use crate::linalg::frobenius;
    use crate::subspace::eigendecompose_matrix;
    use num_complex::Complex64;

    fn geometry() -> ArrayGeometry {
        ArrayGeometry::new(10, 0.5).unwrap()
    }

    fn paper_scenario(snr: f64, r: f64) -> SourceScenario {
        SourceScenario::equicorrelated(geometry(), vec![35f64.to_radians(), 37f64.to_radians()], snr, r, 10).unwrap()
    }

    fn full_sml(r: &CMatrix, thetas: &[f64], g: &ArrayGeometry) -> f64 {
        let a = g.steering_matrix(thetas).unwrap();
        let p = ColumnSpace::new(&a).unwrap().projector;
        let m = g.num_sensors();
        let pp = CMatrix::identity(m, m) - &p;
        let level = trace(&(&pp * r)).re / (m - thetas.len()) as f64;
        let arg = hermitian_part(&(&p * r * &p + &pp * c64(level, 0.0)));
        hermitian_eigenvalues(&arg).unwrap().iter().map(|l| l.max(1e-300).ln()).sum()
    }

    #[test]
    fn least_squares_contracts() {
        let g = geometry();
        let a = g.steering_matrix(&[0.2, 0.6]).unwrap();
        let s = CMatrix::from_fn(2, 3, |i, j| c64(i as f64 + 1.0, j as f64 - 1.0));
        let x = SnapshotSet::new(&a * &s).unwrap();
        let (amp, res) = ls_source_and_noise(&x, &a).unwrap();
        assert!(frobenius(&res) < 1e-10);
        assert!(frobenius(&(amp - s)) < 1e-10);

        let snapshots = generate_snapshots(&paper_scenario(0.0, 0.0), 9).unwrap();
        let (amp, res) = ls_source_and_noise(&snapshots, &a).unwrap();
        let fitted = &a * amp;
        let total = frobenius(snapshots.data()).powi(2);
        let split = frobenius(&fitted).powi(2) + frobenius(&res).powi(2);
        assert!((total - split).abs() <= 1e-8 * total);
        assert!(frobenius(&(a.adjoint() * res)) < 1e-8 * total.sqrt());
    }

    #[test]
    fn orthogonal_steering_gives_scaled_correlation() {
        // Broadside and endfire are orthogonal for M = 2 at half-wavelength.
        let g = ArrayGeometry::new(2, 0.5).unwrap();
        let a = g.steering_matrix(&[0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        let x = CMatrix::from_column_slice(2, 1, &[c64(1.0, 0.5), c64(-0.3, 2.0)]);
        let (amp, _) = ls_source_and_noise(&SnapshotSet::new(x.clone()).unwrap(), &a).unwrap();
        let expected = a.adjoint() * x / c64(2.0, 0.0);
        assert!(frobenius(&(amp - expected)) < 1e-14);
    }

    #[test]
    fn duplicate_steering_is_rejected() {
        let g = geometry();
        let a = g.steering_matrix(&[0.3, 0.3]).unwrap();
        assert!(matches!(
            cross_term(&CMatrix::identity(10, 10), &a),
            Err(DoaError::IllConditioned { .. })
        ));
    }

    #[test]
    fn cross_term_contracts() {
        let g = geometry();
        let a = g.steering_matrix(&[0.2, 0.6]).unwrap();
        let t = cross_term(&CMatrix::identity(10, 10), &a).unwrap();
        assert!(frobenius(&t) < 1e-12);

        let s = paper_scenario(10.0, 0.0);
        let truth = true_covariance(&s);
        let noiseless = &truth - CMatrix::identity(10, 10);
        let t = cross_term(&noiseless, &s.steering_matrix()).unwrap();
        assert!(frobenius(&t) < 1e-10 * frobenius(&noiseless));

        let r = sample_covariance(&generate_snapshots(&s, 1).unwrap()).unwrap();
        let t = cross_term(r.matrix(), &a).unwrap();
        let p = ColumnSpace::new(&a).unwrap().projector;
        assert!(frobenius(&(&p * &t - &t)) < 1e-10 * frobenius(r.matrix()));
        assert!(frobenius(&(&t * &p)) < 1e-10 * frobenius(r.matrix()));
        let sum = &t + t.adjoint();
        assert_eq!(sum.clone(), sum.adjoint());
    }

    #[test]
    fn modified_covariance_contracts() {
        let g = geometry();
        let s = paper_scenario(5.0, 0.9);
        let r = sample_covariance(&generate_snapshots(&s, 3).unwrap()).unwrap();
        let a = g.steering_matrix(&[0.5, 0.7]).unwrap();
        let t = cross_term(r.matrix(), &a).unwrap();
        assert_eq!(modified_covariance(r.matrix(), &t, 0.0).unwrap().matrix(), r.matrix());
        let zero = CMatrix::zeros(10, 10);
        assert_eq!(modified_covariance(r.matrix(), &zero, 0.7).unwrap().matrix(), r.matrix());
        let r2 = modified_covariance(r.matrix(), &t, 1.0).unwrap();
        let p = ColumnSpace::new(&a).unwrap().projector;
        let pp = CMatrix::identity(10, 10) - &p;
        assert!(frobenius(&(&p * r2.matrix() * &pp)) < 1e-10 * frobenius(r.matrix()));
        assert!(matches!(modified_covariance(r.matrix(), &t, 1.5), Err(DoaError::GammaOutOfRange(_))));

        let gamma = 0.4;
        let r2 = modified_covariance(r.matrix(), &t, gamma).unwrap();
        let via_t = trace(r.matrix()).re - 2.0 * gamma * trace(&t).re;
        assert!((trace(r2.matrix()).re - via_t).abs() < 1e-10 * trace(r.matrix()).re);
    }

    #[test]
    fn sml_closed_forms() {
        let g = geometry();
        let eye = CMatrix::identity(10, 10);
        assert!(sml_objective(&eye, &[0.1, 0.4], &g).unwrap().abs() < 1e-12);
        let c = 2.5;
        let v = sml_objective(&(eye * c64(c, 0.0)), &[0.1, 0.4], &g).unwrap();
        assert!((v - 10.0 * c.ln()).abs() < 1e-12);
    }

    #[test]
    fn sml_matches_direct_determinant() {
        let g = ArrayGeometry::new(3, 0.5).unwrap();
        let r = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c64(3.0, 0.0), c64(1.0, 0.0), c64(1.0, 0.0)]));
        // a = [1,1,1]: P = J/3, P R P = (5/9) J, Tr{P_perp R} = 5 - 5/3 = 10/3.
        let p = CMatrix::from_element(3, 3, c64(1.0 / 3.0, 0.0));
        let pp = CMatrix::identity(3, 3) - &p;
        let arg = &p * &r * &p + &pp * c64(10.0 / 3.0 / 2.0, 0.0);
        let det: Complex64 = arg.determinant();
        let v = sml_objective(&r, &[0.0], &g).unwrap();
        assert!((v - det.re.ln()).abs() < 1e-12, "{v} vs {}", det.re.ln());
    }

    #[test]
    fn fast_sml_agrees_with_full_route_and_is_order_invariant() {
        let g = geometry();
        for seed in 0..20 {
            let r = sample_covariance(&generate_snapshots(&paper_scenario(0.0, 0.9), seed).unwrap()).unwrap();
            let thetas = [0.1 + 0.01 * seed as f64, 0.8];
            let fast = sml_objective(r.matrix(), &thetas, &g).unwrap();
            let full = full_sml(r.matrix(), &thetas, &g);
            assert!((fast - full).abs() < 1e-9 * full.abs().max(1.0), "{fast} vs {full}");
            let swapped = sml_objective(r.matrix(), &[thetas[1], thetas[0]], &g).unwrap();
            assert!((fast - swapped).abs() < 1e-12 * fast.abs().max(1.0));
        }
    }

    #[test]
    fn sml_rejects_duplicates() {
        let g = geometry();
        assert!(sml_objective(&CMatrix::identity(10, 10), &[0.2, 0.2], &g).is_err());
    }

    #[test]
    fn gamma_grid_validation() {
        assert!(TwoStepConfig::new(vec![0.1, 0.5], FbOrder::Pre).is_err());
        assert!(TwoStepConfig::new(vec![0.0, 1.5], FbOrder::Pre).is_err());
        assert!(TwoStepConfig::new(vec![0.0, 0.5, 0.5], FbOrder::Pre).is_err());
        let c = TwoStepConfig::new(vec![0.5, 0.0], FbOrder::Post).unwrap();
        assert_eq!(c.gamma_grid(), &[0.0, 0.5]);
        assert_eq!(TwoStepConfig::default().gamma_grid().len(), 11);
    }

    #[test]
    fn zero_only_grid_reproduces_step_one() {
        let s = paper_scenario(0.0, 0.0);
        let x = generate_snapshots(&s, 21).unwrap();
        let config = TwoStepConfig::new(vec![0.0], FbOrder::Pre).unwrap();
        for base in [RootMusicEstimator::conventional(), RootMusicEstimator::unitary()] {
            let result = two_step_estimate(&x, 2, &s.geometry, &config, &base).unwrap();
            assert_eq!(result.step1.doa, result.step2.doa);
            assert_eq!(result.chosen_gamma, 0.0);
        }
    }

    #[test]
    fn noiseless_two_step_is_exact() {
        let base = paper_scenario(10.0, 0.0);
        let s = SourceScenario::new(base.geometry, base.doas().to_vec(), base.source_covariance().clone(), 0.0, 10)
            .unwrap();
        let x = generate_snapshots(&s, 2).unwrap();
        let result = two_step_estimate(&x, 2, &s.geometry, &TwoStepConfig::default(), &RootMusicEstimator::conventional())
            .unwrap();
        for (est, want) in result.step2.doa.thetas().iter().zip(s.doas()) {
            assert!((est - want).abs() < 1e-8);
        }
        assert_eq!(result.step1.doa, result.step2.doa);
    }

    #[test]
    fn chosen_gamma_attains_grid_minimum() {
        let s = paper_scenario(2.0, 0.0);
        for seed in 0..10 {
            let x = generate_snapshots(&s, seed).unwrap();
            let result =
                two_step_estimate(&x, 2, &s.geometry, &TwoStepConfig::default(), &RootMusicEstimator::unitary()).unwrap();
            let min = result.sml_values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            let at_chosen = result.sml_values.iter().find(|v| v.0 == result.chosen_gamma).unwrap().1;
            assert_eq!(min, at_chosen);
            let first = result.sml_values.iter().position(|v| v.1 == min).unwrap();
            assert_eq!(result.sml_values[first].0, result.chosen_gamma);
            let at_zero = result.sml_values.iter().find(|v| v.0 == 0.0).unwrap().1;
            assert!(at_chosen <= at_zero);
        }
    }

    #[test]
    fn fb_order_variants_agree() {
        let s = paper_scenario(3.0, 0.9);
        let base = RootMusicEstimator::unitary();
        for seed in 0..10 {
            let x = generate_snapshots(&s, seed).unwrap();
            let pre = two_step_estimate(&x, 2, &s.geometry, &TwoStepConfig::default(), &base).unwrap();
            let post_cfg = TwoStepConfig::new(default_gamma_grid(), FbOrder::Post).unwrap();
            let post = two_step_estimate(&x, 2, &s.geometry, &post_cfg, &base).unwrap();
            for (a, b) in pre.sml_values.iter().zip(&post.sml_values) {
                assert!((a.1 - b.1).abs() < 1e-8 * a.1.abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicate_step_one_falls_back() {
        struct Duplicating;
        impl DoaEstimator for Duplicating {
            fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate> {
                let mut est = RootMusicEstimator::conventional().estimate(covariance, ctx)?;
                let z = est.doa.source_roots()[0];
                est.doa = crate::root_music::roots_to_doas(&[z, z], &ctx.geometry);
                Ok(est)
            }
            fn forward_backward(&self) -> bool {
                false
            }
        }
        let s = paper_scenario(0.0, 0.0);
        let x = generate_snapshots(&s, 1).unwrap();
        let result = two_step_estimate(&x, 2, &s.geometry, &TwoStepConfig::default(), &Duplicating).unwrap();
        assert!(result.fell_back);
        assert_eq!(result.step1.doa, result.step2.doa);
    }

    #[test]
    fn step_two_reduces_leakage_on_average() {
        let s = paper_scenario(10.0, 0.0);
        let truth = true_subspace_model(&s).unwrap();
        let (mut rho1, mut rho2) = (0.0, 0.0);
        let trials = 300;
        for seed in 0..trials {
            let x = generate_snapshots(&s, seed).unwrap();
            let result =
                two_step_estimate(&x, 2, &s.geometry, &TwoStepConfig::default(), &RootMusicEstimator::conventional())
                    .unwrap();
            rho1 += empirical_leakage(&result.step1.signal_projector, &truth.signal_projector, 2).unwrap();
            let d = eigendecompose_matrix(result.modified_covariance.matrix(), 2).unwrap();
            rho2 += empirical_leakage(&d.signal_projector, &truth.signal_projector, 2).unwrap();
        }
        assert!(rho2 < rho1, "step 2 {rho2} vs step 1 {rho1}");
    }
}

//! Subspace leakage: the empirical measure and its closed-form first-order
//! predictions for the plain and the two-step modified covariance.

use num_complex::Complex64;

use crate::array_model::TrueModel;
use crate::error::{DoaError, Result};
use crate::linalg::{c64, frobenius, hermitian_residual, trace, CMatrix, ColumnSpace};

/// `1 - Tr{P_hat P} / K`, clipped to `[0, 1]`.
pub fn empirical_leakage(estimated: &CMatrix, truth: &CMatrix, k: usize) -> Result<f64> {
    if estimated.shape() != truth.shape() || estimated.nrows() != estimated.ncols() {
        return Err(DoaError::DimensionMismatch(format!(
            "projectors are {:?} and {:?}",
            estimated.shape(),
            truth.shape()
        )));
    }
    for p in [estimated, truth] {
        let tr = trace(p).re;
        if (tr - k as f64).abs() > 1e-6 * k as f64 {
            return Err(DoaError::RankMismatch { expected: k, trace: tr });
        }
    }
    // Tr{A B} for Hermitian A, B is the real entrywise inner product.
    let overlap: f64 = estimated
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a.conj() * b).re)
        .sum();
    Ok((1.0 - overlap / k as f64).clamp(0.0, 1.0))
}

/// `E{rho_1} = sigma^2 (M-K) / (N K) * sum lambda / (lambda - sigma^2)^2`
/// over the signal eigenvalues.
pub fn expected_leakage_step1(model: &TrueModel, n: usize, k: usize) -> Result<f64> {
    check_sources(model, k)?;
    let m = model.num_sensors() as f64;
    let sigma2 = model.noise_power;
    let sum: f64 = model
        .signal_eigenvalues()
        .iter()
        .map(|&l| {
            let gap = l - sigma2;
            l / (gap * gap)
        })
        .sum();
    Ok(sigma2 * (m - k as f64) / (n as f64 * k as f64) * sum)
}

fn check_sources(model: &TrueModel, k: usize) -> Result<()> {
    if k != model.num_sources() {
        return Err(DoaError::DimensionMismatch(format!(
            "model has {} sources, asked for K={k}",
            model.num_sources()
        )));
    }
    Ok(())
}

fn quad(u: &CMatrix, w: &CMatrix, v: &CMatrix) -> Complex64 {
    (u.adjoint() * w * v)[(0, 0)]
}

/// First-order error of `omega_k` caused by a covariance perturbation:
/// `(x - y) / (2j D)` with `x = a1^H P_perp dR V^dag a`,
/// `y = a^H V^dag dR P_perp a1` and `D = a1^H P_perp a1`.
pub fn first_order_doa_error(model: &TrueModel, delta_r: &CMatrix, k: usize) -> Result<f64> {
    let m = model.num_sensors();
    if delta_r.shape() != (m, m) {
        return Err(DoaError::DimensionMismatch(format!(
            "perturbation is {:?}, expected {m}x{m}",
            delta_r.shape()
        )));
    }
    if k >= model.num_sources() {
        return Err(DoaError::DimensionMismatch(format!("no source {k}")));
    }
    let residual = hermitian_residual(delta_r);
    if residual > 1e-12 * frobenius(delta_r).max(1.0) {
        return Err(DoaError::NotHermitian { residual });
    }
    let a = model.steering.columns(k, 1).into_owned();
    let a1 = model.steering_derivatives.columns(k, 1).into_owned();
    let pp = &model.noise_projector;
    let vd = &model.v_pseudoinverse;
    let x = quad(&a1, &(pp * delta_r * vd), &a);
    let y = quad(&a, &(vd * delta_r * pp), &a1);
    let d = quad(&a1, pp, &a1).re;
    let value = (x - y) / (c64(0.0, 2.0) * d);
    if value.im.abs() > 1e-10 * (x.norm() + y.norm()) / d + f64::MIN_POSITIVE {
        return Err(DoaError::NotHermitian { residual: value.im.abs() });
    }
    Ok(value.re)
}

/// Closed-form `E{rho_2}` at a fixed reliability factor:
/// `(1-g)^2 E{rho_1} + 2(g-g^2) s2/(NK) Re{S_1} + g^2 s2/(2NK) S_2`, where
/// `S_1 = sum_k a1_k^H P_perp dA_k B A^H W a_k / (2j D_k)`,
/// `S_2 = sum_{k,i} Tr{dA_k^H P_perp dA_i B} Re{a_i^H W a_k a1_k^H P_perp a1_i} / (D_k D_i)`,
/// `dA_k = dA/domega_k`, `B = (A^H A)^-1`, `W = V^dag R V^dag`.
pub fn expected_leakage_step2(model: &TrueModel, n: usize, k: usize, gamma: f64) -> Result<f64> {
    check_sources(model, k)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DoaError::GammaOutOfRange(gamma));
    }
    let rho1 = expected_leakage_step1(model, n, k)?;
    let m = model.num_sensors();
    let sigma2 = model.noise_power;
    let a = &model.steering;
    let pp = &model.noise_projector;
    let b = ColumnSpace::new(a)?.gram_inverse;
    let w = model.vdag_r_vdag();
    let bahw = &b * a.adjoint() * &w;

    let column = |src: usize| model.steering_derivatives.columns(src, 1).into_owned();
    let steering_jacobian = |src: usize| {
        let mut da = CMatrix::zeros(m, k);
        da.set_column(src, &(model.steering_derivatives.column(src) * c64(0.0, 1.0)));
        da
    };
    let d: Vec<f64> = (0..k).map(|src| quad(&column(src), pp, &column(src)).re).collect();

    let mut middle = c64(0.0, 0.0);
    for src in 0..k {
        let a1 = column(src);
        let ak = a.columns(src, 1).into_owned();
        let num = (a1.adjoint() * pp * steering_jacobian(src) * &bahw * &ak)[(0, 0)];
        middle += num / (c64(0.0, 2.0) * d[src]);
    }

    let mut double_sum = c64(0.0, 0.0);
    for src_k in 0..k {
        let dak = steering_jacobian(src_k);
        let a1k = column(src_k);
        let ak = a.columns(src_k, 1).into_owned();
        for src_i in 0..k {
            let weight = trace(&(dak.adjoint() * pp * steering_jacobian(src_i) * &b));
            let ai = a.columns(src_i, 1).into_owned();
            let a1i = column(src_i);
            let inner = quad(&ai, &w, &ak) * quad(&a1k, pp, &a1i);
            double_sum += weight * inner.re / (d[src_k] * d[src_i]);
        }
    }
    if double_sum.im.abs() > 1e-8 * double_sum.norm().max(f64::MIN_POSITIVE) {
        return Err(DoaError::NonFinite("imaginary residue in leakage double sum"));
    }

    let nk = n as f64 * k as f64;
    let value = (1.0 - gamma).powi(2) * rho1
        + 2.0 * (gamma - gamma * gamma) * sigma2 / nk * middle.re
        + gamma * gamma * sigma2 / (2.0 * nk) * double_sum.re;
    Ok(value)
}

/// Theory and Monte Carlo leakage at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    pub empirical_rho1: f64,
    pub empirical_rho2: f64,
    pub theoretical_rho1: f64,
    pub theoretical_rho2: f64,
    /// Fixed reliability factor, or the mean SML-chosen one.
    pub gamma: f64,
    pub trials: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_model::{generate_snapshots, true_subspace_model, ArrayGeometry, SourceScenario};
    use crate::linalg::hermitian_eigen;
    use crate::root_music::root_music;
    use crate::subspace::{eigendecompose_matrix, sample_covariance};

    fn paper_scenario(snr: f64, r: f64) -> SourceScenario {
        let g = ArrayGeometry::new(10, 0.5).unwrap();
        SourceScenario::equicorrelated(g, vec![35f64.to_radians(), 37f64.to_radians()], snr, r, 10).unwrap()
    }

    #[test]
    fn leakage_extremes() {
        let model = true_subspace_model(&paper_scenario(10.0, 0.0)).unwrap();
        let p = &model.signal_projector;
        assert!(empirical_leakage(p, p, 2).unwrap() < 1e-12);
        let g = model.noise_basis.columns(0, 2).into_owned();
        let inside_noise = &g * g.adjoint();
        assert!((empirical_leakage(&inside_noise, p, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            empirical_leakage(&inside_noise, p, 3),
            Err(DoaError::RankMismatch { .. })
        ));
    }

    #[test]
    fn leakage_equals_noise_energy_of_estimated_basis() {
        let s = paper_scenario(0.0, 0.9);
        let model = true_subspace_model(&s).unwrap();
        let r = sample_covariance(&generate_snapshots(&s, 4).unwrap()).unwrap();
        let d = eigendecompose_matrix(r.matrix(), 2).unwrap();
        let rho = empirical_leakage(&d.signal_projector, &model.signal_projector, 2).unwrap();
        let energy: f64 = (0..2)
            .map(|i| {
                let e = d.signal_basis.column(i);
                (&model.noise_projector * e).norm_squared()
            })
            .sum::<f64>()
            / 2.0;
        assert!((rho - energy).abs() < 1e-10);
    }

    #[test]
    fn two_sensor_step_one_closed_form() {
        let g = ArrayGeometry::new(2, 0.5).unwrap();
        let s = SourceScenario::new(g, vec![0.2], CMatrix::identity(1, 1), 1.0, 10).unwrap();
        let model = true_subspace_model(&s).unwrap();
        let n = 10;
        let v = expected_leakage_step1(&model, n, 1).unwrap();
        assert!((v - 0.75 / n as f64).abs() < 1e-14);
        let v2 = expected_leakage_step1(&model, 2 * n, 1).unwrap();
        assert!((v2 - v / 2.0).abs() < 1e-16);
    }

    #[test]
    fn zero_perturbation_gives_zero_error() {
        let model = true_subspace_model(&paper_scenario(10.0, 0.0)).unwrap();
        assert_eq!(first_order_doa_error(&model, &CMatrix::zeros(10, 10), 0).unwrap(), 0.0);
        let skew = CMatrix::from_fn(10, 10, |i, j| c64(i as f64 - j as f64, 0.0));
        assert!(first_order_doa_error(&model, &skew, 0).is_err());
    }

    #[test]
    fn first_order_error_predicts_high_snr_root_music() {
        // The expansion also needs the source-covariance error to be small,
        // hence many snapshots.
        let s = paper_scenario(30.0, 0.0).with_snapshots(2000).unwrap();
        let model = true_subspace_model(&s).unwrap();
        let (mut miss, mut total) = (0.0, 0.0);
        for seed in 0..20 {
            let r = sample_covariance(&generate_snapshots(&s, seed).unwrap()).unwrap();
            let (est, _) = root_music(r.matrix(), 2, &s.geometry).unwrap();
            let delta = r.matrix() - &model.covariance;
            for k in 0..2 {
                let predicted = first_order_doa_error(&model, &delta, k).unwrap();
                let actual = est.source_roots()[k].arg() - model.omegas[k];
                miss += (predicted - actual).powi(2);
                total += actual * actual;
            }
        }
        assert!(miss <= 0.05 * total, "residual {miss} vs {total}");
    }

    #[test]
    fn step_two_reduces_to_step_one_at_zero() {
        for r in [0.0, 0.9] {
            let model = true_subspace_model(&paper_scenario(15.0, r)).unwrap();
            let e1 = expected_leakage_step1(&model, 10, 2).unwrap();
            assert_eq!(expected_leakage_step2(&model, 10, 2, 0.0).unwrap(), e1);
        }
    }

    #[test]
    fn step_two_is_quadratic_in_gamma() {
        let model = true_subspace_model(&paper_scenario(5.0, 0.9)).unwrap();
        let f = |g: f64| expected_leakage_step2(&model, 10, 2, g).unwrap();
        let (g0, g1, g2, g3) = (0.0, 0.3, 1.0, 0.55);
        let lagrange = f(g0) * (g3 - g1) * (g3 - g2) / ((g0 - g1) * (g0 - g2))
            + f(g1) * (g3 - g0) * (g3 - g2) / ((g1 - g0) * (g1 - g2))
            + f(g2) * (g3 - g0) * (g3 - g1) / ((g2 - g0) * (g2 - g1));
        assert!((lagrange - f(g3)).abs() <= 1e-12 * f(g3).abs().max(1e-300) + 1e-15);
    }

    #[test]
    fn step_two_theory_below_step_one_at_high_snr() {
        for snr in [10.0, 15.0, 20.0] {
            let model = true_subspace_model(&paper_scenario(snr, 0.0)).unwrap();
            let e1 = expected_leakage_step1(&model, 10, 2).unwrap();
            let best = (1..=10)
                .map(|i| expected_leakage_step2(&model, 10, 2, i as f64 / 10.0).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(best < e1);
        }
    }

    #[test]
    fn steering_jacobian_matches_finite_difference() {
        let g = ArrayGeometry::new(10, 0.5).unwrap();
        let w = 1.8;
        let h = 1e-6;
        let fd = (g.steering_from_omega(w + h) - g.steering_from_omega(w - h)) / c64(2.0 * h, 0.0);
        let analytic = g.derivative_from_omega(w) * c64(0.0, 1.0);
        assert!((fd - analytic).norm() < 1e-6);
    }

    #[test]
    fn leakage_invariant_to_basis_rotation() {
        let s = paper_scenario(0.0, 0.0);
        let model = true_subspace_model(&s).unwrap();
        let r = sample_covariance(&generate_snapshots(&s, 2).unwrap()).unwrap();
        let d = eigendecompose_matrix(r.matrix(), 2).unwrap();
        let rot = hermitian_eigen(&CMatrix::from_row_slice(
            2,
            2,
            &[c64(1.0, 0.0), c64(0.3, 0.4), c64(0.3, -0.4), c64(2.0, 0.0)],
        ))
        .unwrap()
        .1;
        let rotated = &d.signal_basis * rot;
        let p2 = &rotated * rotated.adjoint();
        let a = empirical_leakage(&d.signal_projector, &model.signal_projector, 2).unwrap();
        let b = empirical_leakage(&p2, &model.signal_projector, 2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

//! Root-swap root-MUSIC (SML search over root combinations) and the
//! normal-approximation estimate of the root-swap probability.

use std::f64::consts::SQRT_2;

use crate::array_model::{ArrayGeometry, SourceScenario, TrueModel};
use crate::error::{DoaError, Result};
use crate::linalg::CMatrix;
use crate::root_music::{roots_to_doas, DoaEstimate, RootSet};
use crate::two_step::sml_objective;

/// Candidate signal-root sets: the `p` roots closest to the unit circle are
/// always kept, the `q` innermost are never considered, and `K - p` more are
/// drawn from the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinationPlan {
    pub num_sensors: usize,
    pub num_sources: usize,
    pub p: usize,
    pub q: usize,
    /// Each entry holds `K - p` indices into the middle roots
    /// `p .. M-1-q` of a magnitude-sorted [`RootSet`], ascending.
    pub combinations: Vec<Vec<usize>>,
}

impl CombinationPlan {
    pub fn new(m: usize, k: usize, p: usize, q: usize) -> Result<Self> {
        let infeasible = DoaError::InfeasiblePlan { m, k, p, q };
        if k == 0 || k >= m || p > k || q + k + 1 > m {
            return Err(infeasible);
        }
        let middle: Vec<usize> = (p..(m - 1 - q)).collect();
        let choose = k - p;
        if choose > middle.len() {
            return Err(infeasible);
        }
        Ok(Self {
            num_sensors: m,
            num_sources: k,
            p,
            q,
            combinations: subsets(&middle, choose),
        })
    }

    /// `N_r = (M-p-q-1)! / ((K-p)! (M-K-q-1)!)`.
    pub fn count(&self) -> usize {
        self.combinations.len()
    }

    /// Full index sets (pre-picked roots followed by the combination).
    pub fn candidates(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        self.combinations
            .iter()
            .map(|c| (0..self.p).chain(c.iter().copied()).collect())
    }
}

pub fn candidate_combinations(m: usize, k: usize, p: usize, q: usize) -> Result<CombinationPlan> {
    CombinationPlan::new(m, k, p, q)
}

/// All size-`r` subsets of `items` in lexicographic order.
fn subsets(items: &[usize], r: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let Some(pos) = (0..r).rev().find(|&i| idx[i] != i + n - r) else {
            break;
        };
        idx[pos] += 1;
        for j in (pos + 1)..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Index set of the SML-minimizing candidate and its SML value. Ties keep
/// the earlier candidate, so the conventional pick wins ties.
pub fn select_combination(
    sample_cov: &CMatrix,
    roots: &RootSet,
    k: usize,
    geometry: &ArrayGeometry,
    plan: &CombinationPlan,
) -> Result<(Vec<usize>, f64)> {
    if roots.len() + 1 != plan.num_sensors || k != plan.num_sources {
        return Err(DoaError::DimensionMismatch(format!(
            "plan is for M={}, K={}, got {} roots and K={k}",
            plan.num_sensors,
            plan.num_sources,
            roots.len()
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut failures = Vec::new();
    for candidate in plan.candidates() {
        let doa = roots_to_doas(&roots.pick(&candidate), geometry);
        match sml_objective(sample_cov, doa.thetas(), geometry) {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f < b.1) {
                    best = Some((candidate, f));
                }
            }
            Err(e) => failures.push(format!("{candidate:?}: {e}")),
        }
    }
    best.ok_or_else(|| DoaError::AllCandidatesFailed(failures.join("; ")))
}

pub fn root_swap_estimate(
    sample_cov: &CMatrix,
    roots: &RootSet,
    k: usize,
    geometry: &ArrayGeometry,
    plan: &CombinationPlan,
) -> Result<DoaEstimate> {
    let (selected, _) = select_combination(sample_cov, roots, k, geometry, plan)?;
    Ok(roots_to_doas(&roots.pick(&selected), geometry))
}

/// Standard normal tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootSwapProbabilityReport {
    /// Variance parameter per source.
    pub sigma_squared: Vec<f64>,
    /// Magnitudes of the true noise roots.
    pub noise_root_magnitudes: Vec<f64>,
    pub approx_probability: f64,
    /// `M - K < 4`: the normal approximation is coarse there.
    pub low_quality: bool,
}

/// Normal approximation of the probability that some estimated noise root
/// ends up closer to the unit circle than an estimated signal root.
pub fn root_swap_probability(model: &TrueModel, scenario: &SourceScenario) -> Result<RootSwapProbabilityReport> {
    let m = model.num_sensors();
    let k = model.num_sources();
    let n = scenario.num_snapshots() as f64;
    let sigma2 = model.noise_power;
    let signal = model.signal_eigenvalues();

    let mut sigma_squared = Vec::with_capacity(k);
    for src in 0..k {
        let a = model.steering.column(src);
        let a1 = model.steering_derivatives.column(src).into_owned();
        let d = (a1.adjoint() * &model.noise_projector * &a1)[(0, 0)].re;
        let mut sum = 0.0;
        for (i, &lambda) in signal.iter().enumerate() {
            let e = model.signal_basis.column(i);
            let proj = (e.adjoint() * a)[(0, 0)].norm_sqr();
            sum += lambda / (lambda - sigma2).powi(2) * proj;
        }
        let s = sigma2 / (n * d) * sum;
        if !s.is_finite() || s < 0.0 {
            return Err(DoaError::NonFinite("root-swap variance"));
        }
        sigma_squared.push(s);
    }

    let noise_root_magnitudes = model.noise_root_magnitudes();
    let dof = (m - k) as f64 - 0.75;
    let mut no_swap = 1.0;
    for &s2 in &sigma_squared {
        let sigma = s2.sqrt();
        for &r in &noise_root_magnitudes {
            let arg = (-1.0 + r + sigma * dof.sqrt()) / (sigma / 2.0);
            no_swap *= if sigma == 0.0 { 1.0 } else { q_function(arg) };
        }
    }
    Ok(RootSwapProbabilityReport {
        sigma_squared,
        noise_root_magnitudes,
        approx_probability: (1.0 - no_swap).clamp(0.0, 1.0),
        low_quality: m - k < 4,
    })
}

/// Outcome of matching estimated roots to the true signal roots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootEvents {
    /// An unmatched root lies closer to the unit circle than a matched one.
    pub root_swap: bool,
    /// The selected roots include an unmatched root.
    pub ml_failure: bool,
}

/// Greedy nearest matching (closest pair first) of each true signal root
/// `e^{j omega_k}` to an estimated root.
pub fn match_signal_roots(roots: &RootSet, omegas: &[f64]) -> Vec<usize> {
    let mut pairs = Vec::with_capacity(omegas.len() * roots.len());
    for (k, &w) in omegas.iter().enumerate() {
        let truth = num_complex::Complex64::from_polar(1.0, w);
        for (i, z) in roots.roots().iter().enumerate() {
            pairs.push(((z - truth).norm(), k, i));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_done = vec![false; omegas.len()];
    let mut root_used = vec![false; roots.len()];
    let mut matched = Vec::with_capacity(omegas.len());
    for (_, k, i) in pairs {
        if truth_done[k] || root_used[i] {
            continue;
        }
        truth_done[k] = true;
        root_used[i] = true;
        matched.push(i);
    }
    matched.sort_unstable();
    matched
}

pub fn root_events(roots: &RootSet, selected: &[usize], omegas: &[f64]) -> RootEvents {
    let matched = match_signal_roots(roots, omegas);
    let magnitudes = roots.magnitudes();
    let weakest_signal = matched
        .iter()
        .map(|&i| magnitudes[i])
        .fold(f64::INFINITY, f64::min);
    let root_swap = (0..roots.len())
        .filter(|i| !matched.contains(i))
        .any(|i| magnitudes[i] > weakest_signal);
    let ml_failure = selected.iter().any(|i| !matched.contains(i));
    RootEvents { root_swap, ml_failure }
}

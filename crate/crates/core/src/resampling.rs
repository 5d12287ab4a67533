//! Pseudo-noise resampling around any base estimator: perturb the data with
//! synthetic noise several times, and keep the member of the resulting
//! estimate bank with the lowest SML objective on the original data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array_model::{unit_complex_normals, ArrayGeometry, SnapshotSet};
use crate::error::{DoaError, Result};
use crate::estimator::{DoaEstimator, Estimate, EstimationContext};
use crate::linalg::{c64, hermitian_eigenvalues, hermitian_part, CMatrix};
use crate::parallel::derive_seed;
use crate::subspace::sample_covariance;
use crate::two_step::sml_objective;

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingConfig {
    /// Number of perturbed runs `P`.
    pub iterations: usize,
    /// Pseudo-noise power relative to the estimated noise power.
    pub noise_scale: f64,
    pub seed: u64,
    /// Whether the unperturbed estimate joins the bank.
    pub include_original: bool,
}

impl ResamplingConfig {
    pub fn new(iterations: usize, noise_scale: f64, seed: u64) -> Result<Self> {
        if iterations == 0 {
            return Err(DoaError::InvalidConfig("resampling needs at least one iteration".into()));
        }
        if !(noise_scale > 0.0 && noise_scale.is_finite()) {
            return Err(DoaError::InvalidConfig(format!(
                "pseudo-noise scale must be positive, got {noise_scale}"
            )));
        }
        Ok(Self {
            iterations,
            noise_scale,
            seed,
            include_original: true,
        })
    }
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            noise_scale: 1.0,
            seed: 0,
            include_original: true,
        }
    }
}

/// Mean of the `M - K` smallest eigenvalues.
pub fn estimate_noise_power(sample_cov: &CMatrix, num_sources: usize) -> Result<f64> {
    let eig = hermitian_eigenvalues(sample_cov)?;
    let m = eig.len();
    if num_sources >= m {
        return Err(DoaError::DimensionMismatch(format!(
            "cannot estimate noise power with K={num_sources}, M={m}"
        )));
    }
    Ok(eig[..m - num_sources].iter().sum::<f64>().max(0.0) / (m - num_sources) as f64)
}

/// A bank member and its SML score against the raw sample covariance.
#[derive(Debug, Clone)]
pub struct BankMember {
    /// 0 for the unperturbed run, `p` for the p-th perturbed run.
    pub iteration: usize,
    pub estimate: Estimate,
    pub sml: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoNoiseResampler<E> {
    pub inner: E,
    pub iterations: usize,
    pub noise_scale: f64,
    pub include_original: bool,
}

impl<E: DoaEstimator> PseudoNoiseResampler<E> {
    pub fn new(inner: E, config: &ResamplingConfig) -> Self {
        Self {
            inner,
            iterations: config.iterations,
            noise_scale: config.noise_scale,
            include_original: config.include_original,
        }
    }

    /// All successful bank members, original first then by iteration.
    pub fn bank(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Vec<BankMember>> {
        let x = ctx.snapshots.data();
        let (m, n) = (x.nrows(), x.ncols());
        let noise_power = estimate_noise_power(ctx.sample_covariance, ctx.num_sources)?;
        let amplitude = c64((self.noise_scale * noise_power).sqrt(), 0.0);

        let mut members = Vec::with_capacity(self.iterations + 1);
        let mut failures = Vec::new();
        let mut push = |iteration: usize, outcome: Result<Estimate>| match outcome {
            Ok(estimate) => {
                let sml = estimate
                    .sml
                    .or_else(|| sml_objective(ctx.sample_covariance, estimate.doa.thetas(), &ctx.geometry).ok())
                    .unwrap_or(f64::INFINITY);
                members.push(BankMember { iteration, estimate, sml });
            }
            Err(e) => failures.push(format!("run {iteration}: {e}")),
        };
        if self.include_original {
            push(0, self.inner.estimate(covariance, ctx));
        }
        for p in 1..=self.iterations {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[0x504e_52, p as u64]));
            let perturbed = x + unit_complex_normals(&mut rng, m, n) * amplitude;
            let outcome = SnapshotSet::new(perturbed)
                .and_then(|s| sample_covariance(&s))
                .and_then(|r| {
                    let shifted = hermitian_part(&(covariance + (r.matrix() - ctx.sample_covariance)));
                    self.inner.estimate(&shifted, ctx)
                });
            push(p, outcome);
        }
        if members.is_empty() {
            return Err(DoaError::AllCandidatesFailed(failures.join("; ")));
        }
        Ok(members)
    }
}

impl<E: DoaEstimator> DoaEstimator for PseudoNoiseResampler<E> {
    fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate> {
        let bank = self.bank(covariance, ctx)?;
        let mut best = 0;
        for (i, member) in bank.iter().enumerate() {
            if member.sml < bank[best].sml {
                best = i;
            }
        }
        let member = bank.into_iter().nth(best).expect("bank is non-empty");
        let mut estimate = member.estimate;
        if member.sml.is_finite() {
            estimate.sml = Some(member.sml);
        }
        Ok(estimate)
    }

    fn forward_backward(&self) -> bool {
        self.inner.forward_backward()
    }
}

/// Resampled estimate straight from snapshots.
pub fn pseudo_noise_resample(
    snapshots: &SnapshotSet,
    num_sources: usize,
    geometry: &ArrayGeometry,
    base: &dyn DoaEstimator,
    config: &ResamplingConfig,
) -> Result<Estimate> {
    let r = sample_covariance(snapshots)?;
    let ctx = EstimationContext {
        sample_covariance: r.matrix(),
        snapshots,
        num_sources,
        geometry: *geometry,
        seed: config.seed,
    };
    PseudoNoiseResampler::new(base, config).estimate(r.matrix(), &ctx)
}

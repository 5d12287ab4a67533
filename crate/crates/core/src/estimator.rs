//! Composable DOA estimators operating on a covariance matrix.
//!
//! Every estimator receives the covariance to analyse plus an
//! [`EstimationContext`] holding the raw sample covariance, which is what
//! all SML scoring is done against regardless of how the analysed matrix
//! was derived.

use crate::array_model::{ArrayGeometry, SnapshotSet};
use crate::error::Result;
use crate::linalg::CMatrix;
use crate::root_music::{noise_basis_roots, roots_to_doas, DoaEstimate, RootSet};
use crate::root_swap::{select_combination, CombinationPlan};
use crate::subspace::{eigendecompose_matrix, forward_backward_matrix};
use crate::two_step::sml_objective;

pub struct EstimationContext<'a> {
    pub sample_covariance: &'a CMatrix,
    pub snapshots: &'a SnapshotSet,
    pub num_sources: usize,
    pub geometry: ArrayGeometry,
    /// Seed for estimators that draw random numbers (pseudo-noise).
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub doa: DoaEstimate,
    /// Inside-circle roots of the analysed covariance.
    pub roots: RootSet,
    /// Indices into `roots` of the roots behind `doa`.
    pub selected: Vec<usize>,
    /// Estimated signal projector of the covariance that produced `doa`.
    pub signal_projector: CMatrix,
    /// Estimated signal projector before any covariance modification.
    pub first_stage_projector: CMatrix,
    /// Reliability factor chosen by a two-step stage, if any.
    pub gamma: Option<f64>,
    /// SML objective of `doa` against the raw sample covariance; `None`
    /// when the steering matrix is too ill-conditioned to score.
    pub sml: Option<f64>,
}

pub trait DoaEstimator: Send + Sync {
    fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate>;

    /// Whether the estimator forward-backward averages its input.
    fn forward_backward(&self) -> bool;
}

impl<T: DoaEstimator + ?Sized> DoaEstimator for &T {
    fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate> {
        (**self).estimate(covariance, ctx)
    }

    fn forward_backward(&self) -> bool {
        (**self).forward_backward()
    }
}

impl<T: DoaEstimator + ?Sized> DoaEstimator for Box<T> {
    fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate> {
        (**self).estimate(covariance, ctx)
    }

    fn forward_backward(&self) -> bool {
        (**self).forward_backward()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootSelection {
    /// The `K` roots closest to the unit circle.
    Conventional,
    /// SML search over root combinations.
    RootSwap { p: usize, q: usize },
}

/// Root-MUSIC, optionally on the forward-backward averaged covariance
/// (unitary root-MUSIC) and optionally with root-swap selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootMusicEstimator {
    pub forward_backward: bool,
    pub selection: RootSelection,
}

impl RootMusicEstimator {
    pub fn conventional() -> Self {
        Self {
            forward_backward: false,
            selection: RootSelection::Conventional,
        }
    }

    pub fn unitary() -> Self {
        Self {
            forward_backward: true,
            selection: RootSelection::Conventional,
        }
    }

    pub fn with_root_swap(mut self, p: usize, q: usize) -> Self {
        self.selection = RootSelection::RootSwap { p, q };
        self
    }
}

impl DoaEstimator for RootMusicEstimator {
    fn estimate(&self, covariance: &CMatrix, ctx: &EstimationContext<'_>) -> Result<Estimate> {
        let k = ctx.num_sources;
        let averaged;
        let analysed = if self.forward_backward {
            averaged = forward_backward_matrix(covariance);
            &averaged
        } else {
            covariance
        };
        let decomposition = eigendecompose_matrix(analysed, k)?;
        let roots = noise_basis_roots(&decomposition.noise_basis, k)?;
        let (selected, sml) = match self.selection {
            RootSelection::Conventional => {
                let selected: Vec<usize> = (0..k).collect();
                let doa = roots_to_doas(&roots.pick(&selected), &ctx.geometry);
                let sml = sml_objective(ctx.sample_covariance, doa.thetas(), &ctx.geometry).ok();
                (selected, sml)
            }
            RootSelection::RootSwap { p, q } => {
                let plan = CombinationPlan::new(ctx.geometry.num_sensors(), k, p, q)?;
                let (selected, sml) =
                    select_combination(ctx.sample_covariance, &roots, k, &ctx.geometry, &plan)?;
                (selected, Some(sml))
            }
        };
        let doa = roots_to_doas(&roots.pick(&selected), &ctx.geometry);
        Ok(Estimate {
            doa,
            roots,
            selected,
            first_stage_projector: decomposition.signal_projector.clone(),
            signal_projector: decomposition.signal_projector,
            gamma: None,
            sml,
        })
    }

    fn forward_backward(&self) -> bool {
        self.forward_backward
    }
}

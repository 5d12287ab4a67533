//! Subspace DOA estimation for uniform linear arrays: root-MUSIC, the
//! two-step covariance-modification and root-swap variants, pseudo-noise
//! resampling, subspace-leakage theory and a Monte Carlo harness.

pub mod array_model;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod estimator;
pub mod leakage;
pub mod linalg;
pub mod parallel;
pub mod polyroots;
pub mod resampling;
pub mod root_music;
pub mod root_swap;
pub mod subspace;
pub mod two_step;

pub use error::{DoaError, Result};

//! Desk-scale score distillation.
//!
//! Gradient estimators used to distill a diffusion model into the parameters
//! of a differentiable generator (SDS, its isolated reconstruction and
//! classifier terms, the invariant-score estimator, NFSD- and VSD-style
//! variants), evaluated against a Gaussian-mixture prior whose noise
//! prediction is available in closed form, or against a small trained
//! denoiser standing in for an imperfect pretrained model.
//!
//! Modules, bottom-up:
//!
//! - [`schedule`]: noise tables, forward noising, timestep policies, weights.
//! - [`prior`]: conditional Gaussian-mixture priors and the exact ε oracle.
//! - [`mlp`]: a two-layer noise-prediction network with manual backprop.
//! - [`ddim`]: x₀ prediction, DDIM stepping, residual and invariant terms.
//! - [`distill`]: the per-step estimators and their term decomposition.
//! - [`render`]: identity and multi-pose projection generators with VJPs.
//! - [`optimize`]: the distillation loop, Adam, and the diagnostics.

pub mod ddim;
pub mod distill;
mod error;
pub mod mlp;
pub mod optimize;
pub mod prior;
pub mod render;
pub mod schedule;
pub mod vector;

pub use error::{Error, Result};

/// Noise-prediction interface shared by the analytic oracle and the MLP.
///
/// Only forward evaluation is exposed: estimators never differentiate
/// through the model.
pub trait EpsilonModel: Sync {
    /// Data dimension `D`.
    fn dim(&self) -> usize;

    /// Number of real conditions; `None` selects the unconditional path.
    fn num_conditions(&self) -> usize;

    /// Predicted noise `ε(z; cond, t)`.
    fn predict(
        &self,
        z: &[f64],
        t: usize,
        cond: Option<usize>,
        sched: &schedule::NoiseSchedule,
    ) -> Result<Vec<f64>>;
}

/// Deterministic generator used for every seeded run.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Build the run generator from a seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Draw a standard normal vector of length `dim`.
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

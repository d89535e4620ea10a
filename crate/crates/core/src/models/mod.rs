//! Likelihood-based models: explicit categoricals, autoregressive sequence
//! models and EDM-preconditioned toy diffusion models.

mod ar;
mod categorical;
pub mod checkpoint;
mod diffusion;

pub use ar::{ArConfig, ArModel};
pub use categorical::{CategoricalDistribution, CategoricalModel, NORMALIZATION_TOL};
pub use checkpoint::{AnyModel, Checkpoint, TrainableModel};
pub use diffusion::{
    heun_sample, sigma_grid, DiffusionConfig, DiffusionModel, NoiseDraw, NoiseSchedule, TIME_FREQUENCIES,
};

use crate::error::Result;
use crate::grad::{Tape, Tensor, Var};

/// A model with an exact, differentiable log-likelihood and ancestral sampling.
///
/// Labels are `None` for unconditional evaluation; conditional models map
/// `None` to their learned null embedding.
pub trait LikelihoodModel: TrainableModel {
    type Item: Clone + Send + Sync;

    /// Number of classes (0 for unconditional models).
    fn num_classes(&self) -> usize;

    /// Per-item log-likelihoods on the tape, shape `[n]`.
    fn log_prob_taped(
        &self,
        tape: &mut Tape,
        params: &[Var],
        items: &[Self::Item],
        labels: &[Option<usize>],
    ) -> Result<Var>;

    fn log_prob_batch(&self, items: &[Self::Item], labels: &[Option<usize>]) -> Result<Vec<f64>>;

    fn sample(&self, label: Option<usize>, rng: &mut crate::rng::Rng) -> Self::Item;
}

/// Records every parameter of `params` as a leaf.
pub fn record_params(tape: &mut Tape, params: &[Tensor]) -> Result<Vec<Var>> {
    Ok(params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<crate::grad::Result<Vec<_>>>()?)
}

pub(crate) fn check_label(label: Option<usize>, classes: usize) -> Result<()> {
    match label {
        Some(c) if c >= classes => Err(crate::error::Error::OutOfRange {
            what: "label",
            value: c,
            limit: classes,
        }),
        _ => Ok(()),
    }
}

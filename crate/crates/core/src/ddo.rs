//! Discriminative finetuning objectives.
//!
//! The discriminator is never a separate network: it is `σ(β r_θ(x))` with
//! `r_θ(x) = log p_θ(x) - log p_ref(x)`, the log-likelihood ratio between the
//! trainable target and a frozen reference. Real samples should score high,
//! reference samples low:
//!
//! `L_{α,β}(θ) = -E_data log σ(β r_θ) - α E_ref log σ(-β r_θ)`.
//!
//! `α = β = 1` is the plain objective whose minimiser is `p_data`. For
//! diffusion models `r_θ` is replaced by the per-draw denoising-error
//! difference `Δ`, and the expectation over `(t, ε)` is moved outside the
//! sigmoid (an upper bound by convexity).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, log_sigmoid, sigmoid, value_and_grad, Tape, Tensor, Var};
use crate::models::{
    record_params, CategoricalDistribution, CategoricalModel, DiffusionModel, LikelihoodModel, NoiseDraw,
};

/// Loss-shaping coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdoHyperParams {
    /// Weight of the reference-sample term.
    pub alpha: f64,
    /// Scale of the log-ratio inside the sigmoid.
    pub beta: f64,
    /// `alpha` used for reference samples whose label was dropped, so the
    /// unconditional branch never receives negative signal by default.
    #[serde(default)]
    pub uncond_alpha: f64,
    /// Probability of replacing a class label with the null label.
    #[serde(default)]
    pub label_dropout: f64,
}

impl Default for DdoHyperParams {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl DdoHyperParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            uncond_alpha: 0.0,
            label_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.alpha >= 0.0
            && self.beta.is_finite()
            && self.beta > 0.0
            && self.uncond_alpha.is_finite()
            && self.uncond_alpha >= 0.0
            && (0.0..=1.0).contains(&self.label_dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid hyperparameters {self:?}")))
        }
    }

    /// Weight of a reference sample carrying `label` under a model with
    /// `num_classes` classes.
    pub fn alpha_for(&self, label: Option<usize>, num_classes: usize) -> f64 {
        if num_classes > 0 && label.is_none() {
            self.uncond_alpha
        } else {
            self.alpha
        }
    }
}

/// Replaces each label by `None` with probability `rate`.
pub fn apply_label_dropout(labels: &[Option<usize>], rate: f64, rng: &mut impl Rng) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|&l| if rate > 0.0 && rng.random::<f64>() < rate { None } else { l })
        .collect()
}

/// `σ(β (log p_θ(x) - log p_ref(x)))`.
pub fn implicit_discriminator<M: LikelihoodModel>(
    target: &M,
    reference: &M,
    x: &M::Item,
    label: Option<usize>,
    beta: f64,
) -> Result<f64> {
    let items = std::slice::from_ref(x);
    let lt = target.log_prob_batch(items, &[label])?[0];
    let lr = reference.log_prob_batch(items, &[label])?[0];
    let r = lt - lr;
    if !r.is_finite() {
        return Err(Error::NonFinite("log-likelihood ratio"));
    }
    Ok(sigmoid(beta * r))
}

/// Per-state loss `-a log σ(r) - b log σ(-r)` as a function of the log-ratio.
/// Strictly convex in `r` for `a, b > 0`, minimised at `r = ln(a / b)`.
pub fn pointwise_loss(r: f64, a: f64, b: f64) -> f64 {
    -a * log_sigmoid(r) - b * log_sigmoid(-r)
}

/// `-Σ w_real log σ(β r_real) - Σ w_fake log σ(-β r_fake)` on the tape.
/// Both log-ratio variables have shape `[n]` matching their weights.
pub fn weighted_ddo_loss_taped(
    tape: &mut Tape,
    r_real: Var,
    w_real: &[f64],
    r_fake: Var,
    w_fake: &[f64],
    beta: f64,
) -> grad::Result<Var> {
    let pos = tape.scale(r_real, beta)?;
    let pos = tape.log_sigmoid(pos)?;
    let wr = tape.leaf(Tensor::vector(w_real.to_vec()))?;
    let pos = tape.mul(pos, wr)?;
    let pos = tape.sum(pos)?;
    let neg = tape.scale(r_fake, -beta)?;
    let neg = tape.log_sigmoid(neg)?;
    let wf = tape.leaf(Tensor::vector(w_fake.to_vec()))?;
    let neg = tape.mul(neg, wf)?;
    let neg = tape.sum(neg)?;
    let total = tape.add(pos, neg)?;
    tape.neg(total)
}

fn check_pair(reference: &CategoricalDistribution, data: &CategoricalDistribution) -> Result<()> {
    if reference.len() != data.len() {
        return Err(Error::invalid(format!(
            "reference has {} states, data has {}",
            reference.len(),
            data.len()
        )));
    }
    reference.require_full_support("p_ref")?;
    data.require_full_support("p_data")
}

/// Exact `L_{α,β}` for a softmax model with logits `logits`, as a weighted sum
/// over every state.
pub fn ddo_loss_exact_taped(
    tape: &mut Tape,
    logits: Var,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    check_pair(reference, data)?;
    if tape.value(logits).len() != data.len() {
        return Err(Error::invalid("logits and distributions differ in size"));
    }
    let lp = tape.log_softmax(logits)?;
    let lref = tape.leaf(Tensor::vector(reference.log_probs()))?;
    let r = tape.sub(lp, lref)?;
    let w_fake: Vec<f64> = reference.probs().iter().map(|p| alpha * p).collect();
    Ok(weighted_ddo_loss_taped(tape, r, data.probs(), r, &w_fake, beta)?)
}

/// Exact loss and its gradient with respect to the logits.
pub fn ddo_loss_exact_grad(
    target: &CategoricalModel,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let (value, grads) = value_and_grad(
        |tape: &mut Tape, p: &[Var]| ddo_loss_exact_taped(tape, p[0], reference, data, alpha, beta),
        target.params(),
    )?;
    Ok((value, grads[0].data().to_vec()))
}

/// Exact plain loss (`α = β = 1`).
pub fn ddo_loss_exact(
    target: &CategoricalModel,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
) -> Result<f64> {
    ddo_loss_exact_general(target, reference, data, 1.0, 1.0)
}

pub fn ddo_loss_exact_general(
    target: &CategoricalModel,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_pair(reference, data)?;
    let lp = target.log_probs();
    if lp.len() != data.len() {
        return Err(Error::invalid("model and distributions differ in size"));
    }
    let lref = reference.log_probs();
    Ok((0..lp.len())
        .map(|x| {
            let r = beta * (lp[x] - lref[x]);
            -data.prob(x) * log_sigmoid(r) - alpha * reference.prob(x) * log_sigmoid(-r)
        })
        .sum())
}

/// Minimum of the plain loss, attained at `p_θ = p_data`:
/// `-Σ p_data ln(p_data / (p_data + p_ref)) - Σ p_ref ln(p_ref / (p_data + p_ref))`.
pub fn ddo_optimal_loss(reference: &CategoricalDistribution, data: &CategoricalDistribution) -> Result<f64> {
    check_pair(reference, data)?;
    Ok(data
        .probs()
        .iter()
        .zip(reference.probs())
        .map(|(&pd, &pr)| -pd * (pd / (pd + pr)).ln() - pr * (pr / (pd + pr)).ln())
        .sum())
}

/// Closed-form gradient of the plain loss with respect to the logits:
/// `Σ_x (1 - d_θ(x)) (p_θ(x) - p_data(x)) ∇ log p_θ(x)` with
/// `∇_logits log p_θ(x) = e_x - p_θ`.
pub fn ddo_gradient_analytic(
    target: &CategoricalModel,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
) -> Result<Vec<f64>> {
    check_pair(reference, data)?;
    let p = target.distribution();
    if p.len() != data.len() {
        return Err(Error::invalid("model and distributions differ in size"));
    }
    let lp = target.log_probs();
    let lref = reference.log_probs();
    // coefficient of ∇ log p_θ(x) for each state
    let coef: Vec<f64> = (0..p.len())
        .map(|x| (1.0 - sigmoid(lp[x] - lref[x])) * (p.prob(x) - data.prob(x)))
        .collect();
    let total: f64 = coef.iter().sum();
    Ok((0..p.len()).map(|j| coef[j] - total * p.prob(j)).collect())
}

/// Exact `L_{α,β}` and its logit gradient without a tape, for the inner loop
/// of [`fit_exact`]. With `r = β (log p_θ - log p_ref)` and
/// `g_x = α p_ref(x) σ(r_x) - p_data(x) σ(-r_x)`, the logit gradient is
/// `β (g - p_θ Σ_x g_x)`.
fn exact_loss_and_grad(
    target: &CategoricalModel,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_pair(reference, data)?;
    let lp = target.log_probs();
    if lp.len() != data.len() {
        return Err(Error::invalid("model and distributions differ in size"));
    }
    let lref = reference.log_probs();
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(lp.len());
    for x in 0..lp.len() {
        let r = beta * (lp[x] - lref[x]);
        let (pd, pr) = (data.prob(x), alpha * reference.prob(x));
        loss -= pd * log_sigmoid(r) + pr * log_sigmoid(-r);
        g.push(pr * sigmoid(r) - pd * sigmoid(-r));
    }
    let total: f64 = g.iter().sum();
    let grad = g.iter().zip(&lp).map(|(gx, l)| beta * (gx - l.exp() * total)).collect();
    Ok((loss, grad))
}

/// Gradient descent on the exact `L_{α,β}` with a backtracking step size.
/// Stops once the largest logit gradient falls below `tol`. Returns the
/// final loss.
pub fn fit_exact(
    target: &mut CategoricalModel,
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
    alpha: f64,
    beta: f64,
    max_steps: usize,
    tol: f64,
) -> Result<f64> {
    let mut lr = 1.0 / (beta * beta);
    let (mut loss, mut g) = exact_loss_and_grad(target, reference, data, alpha, beta)?;
    for _ in 0..max_steps {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < tol {
            break;
        }
        let gsq: f64 = g.iter().map(|v| v * v).sum();
        loop {
            let trial = CategoricalModel::new(
                target
                    .logits()
                    .iter()
                    .zip(&g)
                    .map(|(l, gi)| l - lr * gi)
                    .collect(),
            );
            let trial_loss = ddo_loss_exact_general(&trial, reference, data, alpha, beta)?;
            if trial_loss <= loss - 0.5 * lr * gsq || lr < 1e-12 {
                *target = trial;
                lr *= 1.5;
                break;
            }
            lr *= 0.5;
        }
        (loss, g) = exact_loss_and_grad(target, reference, data, alpha, beta)?;
    }
    Ok(loss)
}

/// `(Σ_x p_ref(x)^{1-1/β} p_data(x)^{1/β})^β`, the `α` whose optimum is the
/// normalised tilted distribution. Evaluated in log space; a result that is
/// not representable is an error.
pub fn alpha_star(reference: &CategoricalDistribution, data: &CategoricalDistribution, beta: f64) -> Result<f64> {
    let lse = tilted_log_normalizer(reference, data, beta)?;
    let alpha = (beta * lse).exp();
    if alpha.is_finite() && alpha > 0.0 {
        Ok(alpha)
    } else {
        Err(Error::Overflow("alpha_star"))
    }
}

fn tilted_log_weights(reference: &CategoricalDistribution, data: &CategoricalDistribution, beta: f64) -> Result<Vec<f64>> {
    check_pair(reference, data)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let w: Vec<f64> = reference
        .probs()
        .iter()
        .zip(data.probs())
        .map(|(pr, pd)| (1.0 - 1.0 / beta) * pr.ln() + pd.ln() / beta)
        .collect();
    if w.iter().all(|v| v.is_finite()) {
        Ok(w)
    } else {
        Err(Error::Overflow("tilted log-weights"))
    }
}

fn tilted_log_normalizer(reference: &CategoricalDistribution, data: &CategoricalDistribution, beta: f64) -> Result<f64> {
    let w = tilted_log_weights(reference, data, beta)?;
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + w.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Normalised `p_ref^{1-1/β} p_data^{1/β}`.
pub fn theorem3_target(
    reference: &CategoricalDistribution,
    data: &CategoricalDistribution,
    beta: f64,
) -> Result<CategoricalDistribution> {
    CategoricalDistribution::from_log_weights(&tilted_log_weights(reference, data, beta)?)
}

/// Real and reference-generated samples with their labels.
#[derive(Clone, Copy, Debug)]
pub struct DdoBatch<'a, T> {
    pub real: &'a [T],
    pub real_labels: &'a [Option<usize>],
    pub fake: &'a [T],
    pub fake_labels: &'a [Option<usize>],
}

impl<T> DdoBatch<'_, T> {
    fn check(&self) -> Result<()> {
        if self.real.is_empty() || self.fake.is_empty() {
            return Err(Error::invalid("both batches must be nonempty"));
        }
        if self.real.len() != self.real_labels.len() || self.fake.len() != self.fake_labels.len() {
            return Err(Error::invalid("items and labels differ in length"));
        }
        Ok(())
    }
}

fn finite_or(values: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(values)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `L_{α,β}` with explicit per-sample weights on both terms (already
/// including `α` on the reference side).
pub fn ddo_loss_weighted_taped<M: LikelihoodModel>(
    tape: &mut Tape,
    params: &[Var],
    target: &M,
    reference: &M,
    batch: &DdoBatch<'_, M::Item>,
    w_real: &[f64],
    w_fake: &[f64],
    beta: f64,
) -> Result<Var> {
    batch.check()?;
    let ref_real = finite_or(reference.log_prob_batch(batch.real, batch.real_labels)?, "reference log-likelihood")?;
    let ref_fake = finite_or(reference.log_prob_batch(batch.fake, batch.fake_labels)?, "reference log-likelihood")?;
    let lp_real = target.log_prob_taped(tape, params, batch.real, batch.real_labels)?;
    let lp_fake = target.log_prob_taped(tape, params, batch.fake, batch.fake_labels)?;
    let ref_real = tape.leaf(Tensor::vector(ref_real))?;
    let ref_fake = tape.leaf(Tensor::vector(ref_fake))?;
    let r_real = tape.sub(lp_real, ref_real)?;
    let r_fake = tape.sub(lp_fake, ref_fake)?;
    Ok(weighted_ddo_loss_taped(tape, r_real, w_real, r_fake, w_fake, beta)?)
}

/// Monte-Carlo `L_{α,β}`: batch means of both terms, with `α` per reference
/// sample chosen by [`DdoHyperParams::alpha_for`].
pub fn ddo_loss_mc_taped<M: LikelihoodModel>(
    tape: &mut Tape,
    params: &[Var],
    target: &M,
    reference: &M,
    batch: &DdoBatch<'_, M::Item>,
    hp: &DdoHyperParams,
) -> Result<Var> {
    hp.validate()?;
    batch.check()?;
    let n = batch.real.len() as f64;
    let m = batch.fake.len() as f64;
    let w_real = vec![1.0 / n; batch.real.len()];
    let w_fake: Vec<f64> = batch
        .fake_labels
        .iter()
        .map(|&l| hp.alpha_for(l, target.num_classes()) / m)
        .collect();
    ddo_loss_weighted_taped(tape, params, target, reference, batch, &w_real, &w_fake, hp.beta)
}

pub fn ddo_loss_mc<M: LikelihoodModel>(
    target: &M,
    reference: &M,
    batch: &DdoBatch<'_, M::Item>,
    hp: &DdoHyperParams,
) -> Result<f64> {
    Ok(ddo_loss_mc_grad(target, reference, batch, hp)?.0)
}

pub fn ddo_loss_mc_grad<M: LikelihoodModel>(
    target: &M,
    reference: &M,
    batch: &DdoBatch<'_, M::Item>,
    hp: &DdoHyperParams,
) -> Result<(f64, Vec<Tensor>)> {
    value_and_grad(
        |tape: &mut Tape, p: &[Var]| ddo_loss_mc_taped(tape, p, target, reference, batch, hp),
        target.params(),
    )
}

/// Real and reference-generated points for the diffusion loss. Row `i` of
/// both tensors shares the `i`-th `(t, ε)` draw.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionBatch<'a> {
    pub real: &'a Tensor,
    pub real_labels: &'a [Option<usize>],
    pub fake: &'a Tensor,
    pub fake_labels: &'a [Option<usize>],
}

impl DiffusionBatch<'_> {
    fn rows(&self) -> Result<usize> {
        let n = self.real.shape().first().copied().unwrap_or(0);
        if n == 0 || self.fake.shape() != self.real.shape() {
            return Err(Error::invalid(format!(
                "real {:?} and fake {:?} batches must be nonempty and equally shaped",
                self.real.shape(),
                self.fake.shape()
            )));
        }
        if self.real_labels.len() != n || self.fake_labels.len() != n {
            return Err(Error::invalid("one label per row required"));
        }
        Ok(n)
    }
}

/// `Δ = -(‖F_θ - F̂‖² - ‖F_ref - F̂‖²)` per row, without recording.
pub fn diffusion_delta(
    target: &DiffusionModel,
    reference: &DiffusionModel,
    x0: &Tensor,
    labels: &[Option<usize>],
    draw: &NoiseDraw,
) -> Result<Vec<f64>> {
    let et = target.f_error(x0, draw, labels)?;
    let er = reference.f_error(x0, draw, labels)?;
    finite_or(et.iter().zip(&er).map(|(a, b)| b - a).collect(), "diffusion log-ratio surrogate")
}

/// Per-row diffusion DDO loss with one shared draw for the real and fake
/// rows, averaged over rows:
/// `mean_i [-log σ(β Δ_real,i) - α_i log σ(-β Δ_fake,i)]`.
/// The reference network only contributes constants.
pub fn diffusion_ddo_loss_taped(
    tape: &mut Tape,
    params: &[Var],
    target: &DiffusionModel,
    reference: &DiffusionModel,
    batch: &DiffusionBatch<'_>,
    hp: &DdoHyperParams,
    draw: &NoiseDraw,
) -> Result<Var> {
    hp.validate()?;
    let n = batch.rows()?;
    if draw.t.len() != n {
        return Err(Error::invalid("noise draw must have one row per batch row"));
    }
    let ref_real = finite_or(reference.f_error(batch.real, draw, batch.real_labels)?, "reference error")?;
    let ref_fake = finite_or(reference.f_error(batch.fake, draw, batch.fake_labels)?, "reference error")?;
    let e_real = target.f_error_taped(tape, params, batch.real, draw, batch.real_labels)?;
    let e_fake = target.f_error_taped(tape, params, batch.fake, draw, batch.fake_labels)?;
    let ref_real = tape.leaf(Tensor::vector(ref_real))?;
    let ref_fake = tape.leaf(Tensor::vector(ref_fake))?;
    let d_real = tape.sub(ref_real, e_real)?;
    let d_fake = tape.sub(ref_fake, e_fake)?;
    let w_real = vec![1.0 / n as f64; n];
    let w_fake: Vec<f64> = batch
        .fake_labels
        .iter()
        .map(|&l| hp.alpha_for(l, target.num_classes()) / n as f64)
        .collect();
    Ok(weighted_ddo_loss_taped(tape, d_real, &w_real, d_fake, &w_fake, hp.beta)?)
}

/// Diffusion DDO loss and gradient for a given draw.
pub fn diffusion_ddo_loss_grad(
    target: &DiffusionModel,
    reference: &DiffusionModel,
    batch: &DiffusionBatch<'_>,
    hp: &DdoHyperParams,
    draw: &NoiseDraw,
) -> Result<(f64, Vec<Tensor>)> {
    value_and_grad(
        |tape: &mut Tape, p: &[Var]| diffusion_ddo_loss_taped(tape, p, target, reference, batch, hp, draw),
        target.params(),
    )
}

/// Diffusion DDO loss with a fresh shared draw from the training time distribution.
pub fn diffusion_ddo_loss(
    target: &DiffusionModel,
    reference: &DiffusionModel,
    batch: &DiffusionBatch<'_>,
    hp: &DdoHyperParams,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = batch.rows()?;
    let draw = NoiseDraw::sample(target.schedule(), n, target.data_dim(), rng);
    let mut tape = Tape::new();
    let params = record_params(&mut tape, target.params())?;
    let loss = diffusion_ddo_loss_taped(&mut tape, &params, target, reference, batch, hp, &draw)?;
    Ok(tape.value(loss).item()?)
}

/// Where the expectation over the time grid sits relative to the sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JensenReduction {
    /// Expectation outside: the tractable upper bound used for training.
    Pointwise,
    /// `Δ` averaged over the grid first, then passed through the sigmoid.
    AverageFirst,
}

/// Diffusion DDO loss over a fixed time grid, with `eps[k]` the noise for
/// grid point `k` (shared by real and fake rows).
pub fn diffusion_ddo_grid_loss(
    target: &DiffusionModel,
    reference: &DiffusionModel,
    batch: &DiffusionBatch<'_>,
    hp: &DdoHyperParams,
    t_grid: &[f64],
    eps: &[Tensor],
    reduction: JensenReduction,
) -> Result<f64> {
    hp.validate()?;
    let n = batch.rows()?;
    if t_grid.is_empty() || eps.len() != t_grid.len() {
        return Err(Error::invalid("need one noise tensor per grid point"));
    }
    let mut d_real = Vec::with_capacity(t_grid.len());
    let mut d_fake = Vec::with_capacity(t_grid.len());
    for (&t, e) in t_grid.iter().zip(eps) {
        let draw = NoiseDraw {
            t: vec![t; n],
            eps: e.clone(),
        };
        d_real.push(diffusion_delta(target, reference, batch.real, batch.real_labels, &draw)?);
        d_fake.push(diffusion_delta(target, reference, batch.fake, batch.fake_labels, &draw)?);
    }
    let k = t_grid.len() as f64;
    let beta = hp.beta;
    let mut total = 0.0;
    for i in 0..n {
        let alpha = hp.alpha_for(batch.fake_labels[i], target.num_classes());
        total += match reduction {
            JensenReduction::Pointwise => {
                d_real.iter().map(|d| -log_sigmoid(beta * d[i])).sum::<f64>() / k
                    - alpha * d_fake.iter().map(|d| log_sigmoid(-beta * d[i])).sum::<f64>() / k
            }
            JensenReduction::AverageFirst => {
                let mr = d_real.iter().map(|d| d[i]).sum::<f64>() / k;
                let mf = d_fake.iter().map(|d| d[i]).sum::<f64>() / k;
                -log_sigmoid(beta * mr) - alpha * log_sigmoid(-beta * mf)
            }
        };
    }
    Ok(total / n as f64)
}

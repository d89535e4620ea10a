//! Randomised property suites over exact categorical instances and small
//! diffusion networks. Each trial is a pure function of `(seed, trial)`.

use std::f64::consts::LN_2;

use ddo_core::ddo::{
    alpha_star, ddo_gradient_analytic, ddo_loss_exact_grad, ddo_loss_exact_taped, diffusion_ddo_grid_loss,
    fit_exact, theorem3_target, DdoHyperParams, DiffusionBatch, JensenReduction,
};
use ddo_core::grad::{finite_difference_check, Tape, Tensor, Var};
use ddo_core::metrics::{guide_compose, loss_gap, tv, verify_theorem2, BOUND_SLACK};
use ddo_core::models::{CategoricalDistribution, CategoricalModel, DiffusionConfig, DiffusionModel, NoiseSchedule};
use ddo_core::nn::Activation;
use ddo_core::rng::{derived, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorem1,
    Theorem2,
    Theorem3,
    Identity,
    Gradcheck,
    Guidance,
    Jensen,
}

/// Convergence tolerance on TV for the fitting suites.
pub const FIT_TV_TOL: f64 = 1e-3;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const ANALYTIC_GRAD_TOL: f64 = 1e-10;
pub const FD_REL_TOL: f64 = 1e-4;
pub const GUIDANCE_TOL: f64 = 1e-12;
pub const JENSEN_TOL: f64 = 1e-12;
pub const SUPPORT_SIZES: [usize; 3] = [2, 8, 16];
pub const TILT_BETAS: [f64; 3] = [0.25, 0.5, 2.0];
pub const GUIDANCE_WEIGHTS: [f64; 3] = [0.5, 1.0, 3.0];

const FIT_MAX_STEPS: usize = 200_000;
const FIT_GRAD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub passed: bool,
    pub details: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub trials: usize,
    pub failures: usize,
    pub passed: bool,
    pub results: Vec<TrialResult>,
}

impl SuiteReport {
    /// Largest value of a numeric detail field across trials.
    pub fn max_detail(&self, key: &str) -> f64 {
        self.results
            .iter()
            .filter_map(|r| r.details.get(key).and_then(Value::as_f64))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn random_dist(k: usize, min_entry: f64, rng: &mut Rng) -> CategoricalDistribution {
    CategoricalDistribution::random(k, min_entry, rng)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn theorem1_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let k = SUPPORT_SIZES[trial % SUPPORT_SIZES.len()];
    let data = random_dist(k, 0.01, rng);
    let reference = random_dist(k, 0.01, rng);
    let mut model = CategoricalModel::from_distribution(&reference)?;
    let loss = fit_exact(&mut model, &reference, &data, 1.0, 1.0, FIT_MAX_STEPS, FIT_GRAD_TOL)?;
    let dist = tv(&model.distribution(), &data)?;
    Ok(TrialResult {
        trial,
        passed: dist < FIT_TV_TOL,
        details: json!({ "k": k, "tv": dist, "loss": loss }),
    })
}

/// A model distribution between `p_data` and a random point, at a random
/// log-scale distance, so tiny loss gaps are exercised too.
fn random_theta(data: &CategoricalDistribution, rng: &mut Rng) -> CliResult<CategoricalDistribution> {
    let q = random_dist(data.len(), 1e-3, rng);
    let lam = 10f64.powf(-rng.random_range(0.0..6.0));
    let w: Vec<f64> = data
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(d, q)| (1.0 - lam) * d + lam * q)
        .collect();
    Ok(CategoricalDistribution::from_weights(&w)?)
}

fn random_triple(rng: &mut Rng) -> CliResult<[CategoricalDistribution; 3]> {
    let k = rng.random_range(2..=16);
    let data = random_dist(k, 1e-3, rng);
    let reference = random_dist(k, 1e-3, rng);
    let theta = if rng.random::<bool>() {
        random_dist(k, 1e-3, rng)
    } else {
        random_theta(&data, rng)?
    };
    Ok([data, reference, theta])
}

fn theorem2_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let [data, reference, theta] = random_triple(rng)?;
    let r = verify_theorem2(&data, &reference, &theta)?;
    let mut details = serde_json::to_value(&r)?;
    let mirrored = r.constants.c2_mirrored() * r.loss_gap.max(0.0).sqrt();
    details["reverse_bound_mirrored"] = json!(mirrored);
    details["reverse_pass_mirrored"] = json!(r.kl_reverse <= mirrored + BOUND_SLACK);
    Ok(TrialResult {
        trial,
        passed: r.forward_pass && r.reverse_pass,
        details,
    })
}

fn identity_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let [data, reference, theta] = random_triple(rng)?;
    let (gap, identity) = loss_gap(&data, &reference, &theta)?;
    let kl = ddo_core::metrics::kl(&data, &theta)?;
    let err = (gap - identity).abs();
    // The same decomposition with a unit weight on the mixture term, kept in
    // the report to show how far it is from the loss gap.
    let mixture_kl = 0.5 * (kl - identity);
    let unit_weight_error = (gap - (kl - mixture_kl)).abs();
    Ok(TrialResult {
        trial,
        passed: err < IDENTITY_TOL && gap <= kl + BOUND_SLACK,
        details: json!({
            "k": data.len(),
            "gap": gap,
            "identity": identity,
            "error": err,
            "kl": kl,
            "mixture_kl": mixture_kl,
            "unit_weight_error": unit_weight_error,
        }),
    })
}

fn theorem3_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let beta = TILT_BETAS[trial % TILT_BETAS.len()];
    let k = SUPPORT_SIZES[(trial / TILT_BETAS.len()) % SUPPORT_SIZES.len()];
    let data = random_dist(k, 0.01, rng);
    let reference = random_dist(k, 0.01, rng);
    let alpha = alpha_star(&reference, &data, beta)?;
    let target = theorem3_target(&reference, &data, beta)?;
    let mut model = CategoricalModel::from_distribution(&reference)?;
    fit_exact(&mut model, &reference, &data, alpha, beta, FIT_MAX_STEPS, FIT_GRAD_TOL)?;
    let dist = tv(&model.distribution(), &target)?;
    Ok(TrialResult {
        trial,
        passed: dist < FIT_TV_TOL,
        details: json!({ "k": k, "beta": beta, "alpha": alpha, "tv": dist }),
    })
}

fn gradcheck_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let k = 8;
    let data = random_dist(k, 0.01, rng);
    let reference = random_dist(k, 0.01, rng);
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let model = CategoricalModel::new(logits);
    let (_, autodiff) = ddo_loss_exact_grad(&model, &reference, &data, 1.0, 1.0)?;
    let analytic = ddo_gradient_analytic(&model, &reference, &data)?;
    let analytic_err = max_abs_diff(&autodiff, &analytic);
    let fd_err = finite_difference_check(
        |tape: &mut Tape, p: &[Var]| ddo_loss_exact_taped(tape, p[0], &reference, &data, 1.0, 1.0),
        model.params(),
        1e-5,
    )?;
    Ok(TrialResult {
        trial,
        passed: analytic_err < ANALYTIC_GRAD_TOL && fd_err < FD_REL_TOL,
        details: json!({ "analytic_vs_autodiff": analytic_err, "autodiff_vs_fd": fd_err }),
    })
}

fn guidance_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let k = rng.random_range(2..=16);
    let data = random_dist(k, 0.01, rng);
    let reference = random_dist(k, 0.01, rng);
    let mut worst = 0.0f64;
    for w in GUIDANCE_WEIGHTS {
        let guided = guide_compose(&data, &reference, w)?;
        let tilted = theorem3_target(&reference, &data, 1.0 / (1.0 + w))?;
        worst = worst.max(max_abs_diff(guided.probs(), tilted.probs()));
    }
    Ok(TrialResult {
        trial,
        passed: worst < GUIDANCE_TOL,
        details: json!({ "k": k, "max_abs_diff": worst }),
    })
}

fn small_network(rng: &mut Rng) -> CliResult<DiffusionModel> {
    let cfg = DiffusionConfig {
        data_dim: 2,
        hidden: vec![16, 16],
        num_classes: 0,
        activation: Activation::Silu,
        schedule: NoiseSchedule::default(),
    };
    Ok(DiffusionModel::init(cfg, rng)?)
}

fn gaussian(n: usize, rng: &mut Rng) -> CliResult<Tensor> {
    let v = (0..2 * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.5 * z
        })
        .collect();
    Ok(Tensor::matrix(n, 2, v)?)
}

/// Fixed log-spaced 16-point time grid.
pub fn jensen_time_grid() -> Vec<f64> {
    (0..16).map(|k| 0.01 * 1.5f64.powi(k)).collect()
}

fn jensen_trial(rng: &mut Rng, trial: usize) -> CliResult<TrialResult> {
    let target = small_network(rng)?;
    let reference = small_network(rng)?;
    let n = 8;
    let real = gaussian(n, rng)?;
    let fake = gaussian(n, rng)?;
    let labels = vec![None; n];
    let batch = DiffusionBatch {
        real: &real,
        real_labels: &labels,
        fake: &fake,
        fake_labels: &labels,
    };
    let grid = jensen_time_grid();
    let eps = grid.iter().map(|_| gaussian(n, rng)).collect::<CliResult<Vec<_>>>()?;
    let hp = DdoHyperParams::new(rng.random_range(0.5..4.0), rng.random_range(0.01..1.0));
    let loss = |t: &DiffusionModel, red| diffusion_ddo_grid_loss(t, &reference, &batch, &hp, &grid, &eps, red);
    let pointwise = loss(&target, JensenReduction::Pointwise)?;
    let averaged = loss(&target, JensenReduction::AverageFirst)?;
    let expected = (1.0 + hp.alpha) * LN_2;
    let at_ref = [
        loss(&reference, JensenReduction::Pointwise)?,
        loss(&reference, JensenReduction::AverageFirst)?,
    ];
    let ref_err = at_ref.iter().map(|v| (v - expected).abs()).fold(0.0, f64::max);
    Ok(TrialResult {
        trial,
        passed: pointwise >= averaged && ref_err < JENSEN_TOL,
        details: json!({
            "alpha": hp.alpha,
            "beta": hp.beta,
            "pointwise": pointwise,
            "average_first": averaged,
            "at_reference_error": ref_err,
        }),
    })
}

/// Runs `trials` independent trials of `suite`.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> CliResult<SuiteReport> {
    if trials == 0 {
        return Err(CliError::Usage("trials must be at least 1".into()));
    }
    let trial_fn: fn(&mut Rng, usize) -> CliResult<TrialResult> = match suite {
        Suite::Theorem1 => theorem1_trial,
        Suite::Theorem2 => theorem2_trial,
        Suite::Theorem3 => theorem3_trial,
        Suite::Identity => identity_trial,
        Suite::Gradcheck => gradcheck_trial,
        Suite::Guidance => guidance_trial,
        Suite::Jensen => jensen_trial,
    };
    let mut results = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = derived(seed, &[suite as u64, t as u64]);
        results.push(trial_fn(&mut rng, t)?);
    }
    let failures = results.iter().filter(|r| !r.passed).count();
    Ok(SuiteReport {
        suite,
        seed,
        trials,
        failures,
        passed: failures == 0,
        results,
    })
}

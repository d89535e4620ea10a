//! Experiment configuration. Every section rejects unknown keys.

use std::path::Path;

use ddo_core::data::SyntheticTarget;
use ddo_core::ddo::DdoHyperParams;
use ddo_core::metrics::GridSpec;
use ddo_core::models::ArConfig;
use ddo_core::nn::Activation;
use ddo_core::selfplay::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub ddo: DdoSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Full-capacity softmax over `num_states` outcomes, initialised uniform.
    Categorical { num_states: usize },
    Ar {
        vocab_size: usize,
        seq_len: usize,
        #[serde(default)]
        num_classes: usize,
        hidden: usize,
    },
    Diffusion {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        num_classes: usize,
        #[serde(default = "default_activation")]
        activation: Activation,
        /// Defaults to the dataset's pooled standard deviation.
        #[serde(default)]
        sigma_data: Option<f64>,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

fn default_activation() -> Activation {
    Activation::Silu
}

impl ModelSpec {
    pub fn ar_config(&self) -> Option<ArConfig> {
        match *self {
            ModelSpec::Ar {
                vocab_size,
                seq_len,
                num_classes,
                hidden,
            } => Some(ArConfig {
                vocab_size,
                seq_len,
                num_classes,
                hidden,
            }),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Categorical { .. } => "categorical",
            ModelSpec::Ar { .. } => "ar",
            ModelSpec::Diffusion { .. } => "diffusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub target: SyntheticTarget,
    pub n_samples: usize,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_frac: f64,
    /// Keep EMA weights with this half-life (in examples).
    pub ema_half_life: Option<f64>,
    /// Mean of `ln t` in the diffusion training time distribution.
    pub p_mean: f64,
    /// Std of `ln t` in the diffusion training time distribution.
    pub p_std: f64,
    /// Label dropout for conditional models.
    pub label_dropout: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            batch_size: d.batch_size,
            warmup_frac: d.warmup_frac,
            ema_half_life: d.ema_half_life,
            p_mean: -1.2,
            p_std: 1.2,
            label_dropout: 0.0,
        }
    }
}

impl PretrainSection {
    pub fn schedule(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            warmup_frac: self.warmup_frac,
            ema_half_life: self.ema_half_life,
        }
    }
}

/// The `(α, β)` sweep and round count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdoSection {
    pub rounds: u32,
    /// Defaults depend on the model kind, see [`DdoSection::grid`].
    pub alphas: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
    pub uncond_alpha: f64,
    pub label_dropout: f64,
    pub min_rel_improvement: Option<f64>,
    pub train: TrainConfig,
}

impl Default for DdoSection {
    fn default() -> Self {
        Self {
            rounds: 1,
            alphas: None,
            betas: None,
            uncond_alpha: 0.0,
            label_dropout: 0.0,
            min_rel_improvement: None,
            train: TrainConfig::default(),
        }
    }
}

/// Default diffusion sweep.
pub const DIFFUSION_ALPHAS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const DIFFUSION_BETAS: [f64; 4] = [0.01, 0.02, 0.05, 0.1];
/// Default autoregressive sweep.
pub const AR_ALPHAS: [f64; 3] = [10.0, 30.0, 100.0];
pub const AR_BETAS: [f64; 1] = [0.02];

impl DdoSection {
    /// Row-major `alphas × betas` grid.
    pub fn grid(&self, model: &ModelSpec) -> Vec<DdoHyperParams> {
        let (da, db): (&[f64], &[f64]) = match model {
            ModelSpec::Diffusion { .. } => (&DIFFUSION_ALPHAS, &DIFFUSION_BETAS),
            ModelSpec::Ar { .. } => (&AR_ALPHAS, &AR_BETAS),
            ModelSpec::Categorical { .. } => (&[1.0], &[1.0]),
        };
        let alphas = self.alphas.as_deref().unwrap_or(da);
        let betas = self.betas.as_deref().unwrap_or(db);
        let mut grid = Vec::with_capacity(alphas.len() * betas.len());
        for &alpha in alphas {
            for &beta in betas {
                grid.push(DdoHyperParams {
                    alpha,
                    beta,
                    uncond_alpha: self.uncond_alpha,
                    label_dropout: self.label_dropout,
                });
            }
        }
        grid
    }
}

/// Settings of the selection metric for continuous models (enumerable
/// models always use exact KL).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub samples: usize,
    pub sample_steps: usize,
    /// Defaults to a seed derived from the experiment seed.
    pub seed: Option<u64>,
    /// Defaults to 64x64 cells over the data mean ± 4 std.
    pub grid: Option<GridSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            sample_steps: 18,
            seed: None,
            grid: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.dataset.target.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset.n_samples == 0 {
            return bad("dataset.n_samples must be positive".into());
        }
        let target = &self.dataset.target;
        match (&self.model, target) {
            (ModelSpec::Categorical { num_states }, SyntheticTarget::Categorical { probs }) => {
                if *num_states != probs.len() {
                    return bad(format!("model has {num_states} states, target {}", probs.len()));
                }
            }
            (
                ModelSpec::Ar {
                    vocab_size,
                    seq_len,
                    num_classes,
                    ..
                },
                SyntheticTarget::MarkovChain { seq_len: d, chain },
            ) => {
                if *vocab_size != chain.vocab_size() || seq_len != d || *num_classes != 0 {
                    return bad("AR model does not match the Markov target".into());
                }
            }
            (
                ModelSpec::Ar {
                    vocab_size,
                    seq_len,
                    num_classes,
                    ..
                },
                SyntheticTarget::ConditionalMarkov { seq_len: d, chains },
            ) => {
                if *vocab_size != chains[0].vocab_size() || seq_len != d || *num_classes != chains.len() {
                    return bad("AR model does not match the conditional Markov target".into());
                }
            }
            (ModelSpec::Diffusion { num_classes, hidden, .. }, SyntheticTarget::Gmm2d { .. } | SyntheticTarget::TwoMoons { .. }) => {
                if *num_classes != 0 && *num_classes != target.num_classes() {
                    return bad(format!(
                        "diffusion model has {num_classes} classes, target {}",
                        target.num_classes()
                    ));
                }
                if hidden.is_empty() {
                    return bad("diffusion model needs at least one hidden layer".into());
                }
            }
            (m, _) => return bad(format!("{} model cannot be trained on this dataset", m.kind())),
        }
        if let ModelSpec::Ar { .. } = self.model {
            let ar = self.model.ar_config().expect("ar");
            match ar.domain_size() {
                Some(n) if n <= 10_000 => {}
                _ => return bad("AR sequence space must be enumerable (at most 10^4 sequences)".into()),
            }
        }
        if !(self.pretrain.p_std > 0.0) || !self.pretrain.p_mean.is_finite() {
            return bad("pretrain.p_std must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pretrain.label_dropout) {
            return bad("pretrain.label_dropout must lie in [0, 1]".into());
        }
        self.ddo.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let grid = self.ddo.grid(&self.model);
        if grid.is_empty() {
            return bad("ddo grid is empty".into());
        }
        for hp in &grid {
            hp.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.eval.samples == 0 || self.eval.sample_steps < 2 {
            return bad("eval.samples must be positive and eval.sample_steps at least 2".into());
        }
        if let Some(g) = &self.eval.grid {
            g.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }
}

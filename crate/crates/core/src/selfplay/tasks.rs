//! Model families the round runner can train: each supplies a reference
//! cache, one DDO gradient step, one likelihood (MLE) gradient step and the
//! selection metric.

use rand::Rng as _;

use super::TrainConfig;
use crate::data::Gmm2d;
use crate::ddo::{
    apply_label_dropout, ddo_loss_exact_grad, ddo_loss_mc_grad, diffusion_ddo_loss_grad, DdoBatch,
    DdoHyperParams, DiffusionBatch,
};
use crate::error::{Error, Result};
use crate::grad::{value_and_grad, Tape, Tensor, Var};
use crate::metrics::{hist_kl_2d, kl, GridSpec};
use crate::models::{
    ArModel, CategoricalDistribution, CategoricalModel, DiffusionModel, LikelihoodModel, NoiseDraw, TrainableModel,
};
use crate::rng::{seeded, Rng};

pub trait RoundTask: Sync {
    type Model: TrainableModel;
    type Cache: Send + Sync;

    fn reference_cache(&self, reference: &Self::Model, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self::Cache>;

    /// DDO loss on one minibatch and its gradient.
    fn ddo_step(
        &self,
        target: &Self::Model,
        reference: &Self::Model,
        cache: &Self::Cache,
        hp: &DdoHyperParams,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)>;

    /// Likelihood-training loss on one minibatch and its gradient.
    fn mle_step(&self, model: &Self::Model, batch_size: usize, rng: &mut Rng) -> Result<(f64, Vec<Tensor>)>;

    /// Selection metric; lower is better.
    fn metric(&self, model: &Self::Model) -> Result<f64>;
}

/// Labels for `n` reference samples: `None` for unconditional models,
/// otherwise either exactly equal per-class counts or uniform draws.
pub fn reference_labels(num_classes: usize, n: usize, class_balance: bool, rng: &mut Rng) -> Result<Vec<Option<usize>>> {
    if n == 0 {
        return Err(Error::invalid("reference cache needs at least one sample"));
    }
    if num_classes == 0 {
        return Ok(vec![None; n]);
    }
    if class_balance {
        if n % num_classes != 0 {
            return Err(Error::invalid(format!(
                "class-balanced cache of {n} samples is not divisible by {num_classes} classes"
            )));
        }
        return Ok((0..n).map(|i| Some(i % num_classes)).collect());
    }
    Ok((0..n).map(|_| Some(rng.random_range(0..num_classes))).collect())
}

/// Offline samples from a frozen likelihood model.
pub fn generate_reference_cache<M: LikelihoodModel>(
    reference: &M,
    n: usize,
    class_balance: bool,
    rng: &mut Rng,
) -> Result<(Vec<M::Item>, Vec<Option<usize>>)> {
    let labels = reference_labels(reference.num_classes(), n, class_balance, rng)?;
    let items = labels.iter().map(|&l| reference.sample(l, rng)).collect();
    Ok((items, labels))
}

/// Offline samples from a frozen diffusion model.
pub fn generate_diffusion_cache(
    reference: &DiffusionModel,
    n: usize,
    class_balance: bool,
    sample_steps: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<Option<usize>>)> {
    let labels = reference_labels(reference.num_classes(), n, class_balance, rng)?;
    let x = reference.sample(&labels, sample_steps, rng)?;
    Ok((x, labels))
}

fn batch_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Full-capacity softmax model against an explicit target, trained on the
/// exact (enumerated) losses.
#[derive(Clone, Debug)]
pub struct ExactCategoricalTask {
    pub data: CategoricalDistribution,
}

impl RoundTask for ExactCategoricalTask {
    type Model = CategoricalModel;
    type Cache = CategoricalDistribution;

    fn reference_cache(&self, reference: &CategoricalModel, _: &TrainConfig, _: &mut Rng) -> Result<CategoricalDistribution> {
        let d = reference.distribution();
        d.require_full_support("p_ref")?;
        Ok(d)
    }

    fn ddo_step(
        &self,
        target: &CategoricalModel,
        _: &CategoricalModel,
        cache: &CategoricalDistribution,
        hp: &DdoHyperParams,
        _: usize,
        _: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (v, g) = ddo_loss_exact_grad(target, cache, &self.data, hp.alpha, hp.beta)?;
        Ok((v, vec![Tensor::vector(g)]))
    }

    fn mle_step(&self, model: &CategoricalModel, _: usize, _: &mut Rng) -> Result<(f64, Vec<Tensor>)> {
        let probs = self.data.probs().to_vec();
        value_and_grad(
            |tape: &mut Tape, p: &[Var]| {
                let lp = tape.log_softmax(p[0])?;
                let w = tape.leaf(Tensor::vector(probs.clone()))?;
                let ce = tape.mul(lp, w)?;
                let ce = tape.sum(ce)?;
                Ok::<_, Error>(tape.neg(ce)?)
            },
            model.params(),
        )
    }

    fn metric(&self, model: &CategoricalModel) -> Result<f64> {
        kl(&self.data, &model.distribution())
    }
}

/// Autoregressive model on an enumerable sequence space.
#[derive(Clone, Debug)]
pub struct SequenceTask {
    pub data: Vec<Vec<usize>>,
    pub labels: Vec<Option<usize>>,
    /// Exact pmf per class (a single entry for unconditional targets).
    pub exact: Vec<CategoricalDistribution>,
    /// Label dropout during likelihood pretraining of conditional models.
    pub mle_label_dropout: f64,
}

/// Either a pre-generated cache or on-the-fly sampling from the reference.
pub enum SequenceCache {
    Offline(Vec<Vec<usize>>, Vec<Option<usize>>),
    Online,
}

impl SequenceTask {
    fn check(&self) -> Result<()> {
        if self.data.is_empty() || self.data.len() != self.labels.len() {
            return Err(Error::invalid("sequence task needs labelled data"));
        }
        Ok(())
    }
}

impl RoundTask for SequenceTask {
    type Model = ArModel;
    type Cache = SequenceCache;

    fn reference_cache(&self, reference: &ArModel, cfg: &TrainConfig, rng: &mut Rng) -> Result<SequenceCache> {
        if cfg.online_ref {
            return Ok(SequenceCache::Online);
        }
        let (x, l) = generate_reference_cache(reference, cfg.cache_size, cfg.class_balance, rng)?;
        Ok(SequenceCache::Offline(x, l))
    }

    fn ddo_step(
        &self,
        target: &ArModel,
        reference: &ArModel,
        cache: &SequenceCache,
        hp: &DdoHyperParams,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check()?;
        let idx = batch_indices(self.data.len(), batch_size, rng);
        let real: Vec<Vec<usize>> = idx.iter().map(|&i| self.data[i].clone()).collect();
        let labels: Vec<Option<usize>> = idx.iter().map(|&i| self.labels[i]).collect();
        let (fake, fake_labels): (Vec<Vec<usize>>, Vec<Option<usize>>) = match cache {
            SequenceCache::Online => {
                let f = labels.iter().map(|&l| reference.sample(l, rng)).collect();
                (f, labels.clone())
            }
            SequenceCache::Offline(x, l) => {
                let j = batch_indices(x.len(), batch_size, rng);
                (j.iter().map(|&i| x[i].clone()).collect(), j.iter().map(|&i| l[i]).collect())
            }
        };
        // one dropout mask per row, shared by the paired real and fake items
        let keep = apply_label_dropout(&vec![Some(0); batch_size], hp.label_dropout, rng);
        let mask = |ls: &[Option<usize>]| -> Vec<Option<usize>> {
            ls.iter().zip(&keep).map(|(&l, k)| k.and(l)).collect()
        };
        let (real_labels, fake_labels) = (mask(&labels), mask(&fake_labels));
        let batch = DdoBatch {
            real: &real,
            real_labels: &real_labels,
            fake: &fake,
            fake_labels: &fake_labels,
        };
        ddo_loss_mc_grad(target, reference, &batch, hp)
    }

    fn mle_step(&self, model: &ArModel, batch_size: usize, rng: &mut Rng) -> Result<(f64, Vec<Tensor>)> {
        self.check()?;
        let idx = batch_indices(self.data.len(), batch_size, rng);
        let x: Vec<Vec<usize>> = idx.iter().map(|&i| self.data[i].clone()).collect();
        let labels: Vec<Option<usize>> = idx.iter().map(|&i| self.labels[i]).collect();
        let labels = apply_label_dropout(&labels, self.mle_label_dropout, rng);
        value_and_grad(
            |tape: &mut Tape, p: &[Var]| {
                let lp = model.log_prob_taped(tape, p, &x, &labels)?;
                let m = tape.mean(lp)?;
                Ok::<_, Error>(tape.neg(m)?)
            },
            model.params(),
        )
    }

    /// Exact `KL(p_data ‖ p_θ)`, averaged over classes for conditional models.
    fn metric(&self, model: &ArModel) -> Result<f64> {
        let classes = model.num_classes();
        if classes == 0 {
            return kl(&self.exact[0], &model.enumerate(None)?);
        }
        if self.exact.len() != classes {
            return Err(Error::invalid("need one exact pmf per class"));
        }
        let mut total = 0.0;
        for (c, p) in self.exact.iter().enumerate() {
            total += kl(p, &model.enumerate(Some(c))?)?;
        }
        Ok(total / classes as f64)
    }
}

/// 2-D diffusion model against a Gaussian-mixture target, selected by
/// histogram KL of its samples.
#[derive(Clone, Debug)]
pub struct DiffusionTask {
    pub data: Tensor,
    pub labels: Vec<Option<usize>>,
    pub density: Gmm2d,
    pub grid: GridSpec,
    pub eval_samples: usize,
    pub sample_steps: usize,
    /// Seed of the evaluation sampler; fixed so every checkpoint is scored
    /// on the same initial noise.
    pub eval_seed: u64,
    pub mle_label_dropout: f64,
}

impl DiffusionTask {
    fn rows(&self) -> Result<usize> {
        let n = self.data.shape().first().copied().unwrap_or(0);
        if n == 0 || self.labels.len() != n {
            return Err(Error::invalid("diffusion task needs labelled data"));
        }
        Ok(n)
    }

    fn gather(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let dim = x.shape()[1];
        let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
        Ok(Tensor::matrix(idx.len(), dim, data)?)
    }

    fn model_labels(model: &DiffusionModel, labels: &[Option<usize>]) -> Vec<Option<usize>> {
        if model.num_classes() == 0 {
            vec![None; labels.len()]
        } else {
            labels.to_vec()
        }
    }

    /// Labels for evaluation samples, drawn from the mixture weights.
    fn eval_labels(&self, model: &DiffusionModel, rng: &mut Rng) -> Result<Vec<Option<usize>>> {
        if model.num_classes() == 0 {
            return Ok(vec![None; self.eval_samples]);
        }
        let w = CategoricalDistribution::new(self.density.weights.clone())?;
        Ok((0..self.eval_samples).map(|_| Some(w.sample(rng))).collect())
    }

    /// Evaluation samples of `model` with the fixed evaluation seed.
    pub fn eval_draws(&self, model: &DiffusionModel) -> Result<Tensor> {
        let mut rng = seeded(self.eval_seed);
        let labels = self.eval_labels(model, &mut rng)?;
        model.sample(&labels, self.sample_steps, &mut rng)
    }
}

impl RoundTask for DiffusionTask {
    type Model = DiffusionModel;
    type Cache = (Tensor, Vec<Option<usize>>);

    fn reference_cache(&self, reference: &DiffusionModel, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self::Cache> {
        generate_diffusion_cache(reference, cfg.cache_size, cfg.class_balance, self.sample_steps, rng)
    }

    fn ddo_step(
        &self,
        target: &DiffusionModel,
        reference: &DiffusionModel,
        cache: &Self::Cache,
        hp: &DdoHyperParams,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let n = self.rows()?;
        let idx = batch_indices(n, batch_size, rng);
        let real = Self::gather(&self.data, &idx)?;
        let labels: Vec<Option<usize>> = idx.iter().map(|&i| self.labels[i]).collect();
        let j = batch_indices(cache.0.shape()[0], batch_size, rng);
        let fake = Self::gather(&cache.0, &j)?;
        let fake_labels: Vec<Option<usize>> = j.iter().map(|&i| cache.1[i]).collect();
        let keep = apply_label_dropout(&vec![Some(0); batch_size], hp.label_dropout, rng);
        let mask = |ls: &[Option<usize>]| -> Vec<Option<usize>> {
            Self::model_labels(target, ls)
                .iter()
                .zip(&keep)
                .map(|(&l, k)| k.and(l))
                .collect()
        };
        let (real_labels, fake_labels) = (mask(&labels), mask(&fake_labels));
        let draw = NoiseDraw::sample(target.schedule(), batch_size, target.data_dim(), rng);
        let batch = DiffusionBatch {
            real: &real,
            real_labels: &real_labels,
            fake: &fake,
            fake_labels: &fake_labels,
        };
        diffusion_ddo_loss_grad(target, reference, &batch, hp, &draw)
    }

    fn mle_step(&self, model: &DiffusionModel, batch_size: usize, rng: &mut Rng) -> Result<(f64, Vec<Tensor>)> {
        let n = self.rows()?;
        let idx = batch_indices(n, batch_size, rng);
        let x0 = Self::gather(&self.data, &idx)?;
        let labels: Vec<Option<usize>> = idx.iter().map(|&i| self.labels[i]).collect();
        let labels = apply_label_dropout(&Self::model_labels(model, &labels), self.mle_label_dropout, rng);
        let draw = NoiseDraw::sample(model.schedule(), batch_size, model.data_dim(), rng);
        value_and_grad(
            |tape: &mut Tape, p: &[Var]| model.edm_loss_taped(tape, p, &x0, &labels, &draw),
            model.params(),
        )
    }

    fn metric(&self, model: &DiffusionModel) -> Result<f64> {
        let x = self.eval_draws(model)?;
        Ok(hist_kl_2d(&x, |a, b| self.density.density(a, b), &self.grid)?.value)
    }
}

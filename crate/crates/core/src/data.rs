//! Seeded synthetic targets with exact densities or probability mass
//! functions, and the datasets drawn from them.
//!
//! A dataset records the target, sample count and seed that produced it, so
//! [`Provenance::regenerate`] rebuilds it bit for bit.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::models::checkpoint::Checkpoint;
use crate::models::{ArModel, CategoricalDistribution, NORMALIZATION_TOL};
use crate::rng::seeded;

/// Mixture of 2-D Gaussians with an exact log-density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gmm2d {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    /// Row-major `[[σxx, σxy], [σxy, σyy]]`.
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl Default for Gmm2d {
    /// Three components on a unit-side triangle: one dominant mode (0.7) and
    /// two minor ones (0.2, 0.1), each with its own anisotropic covariance.
    fn default() -> Self {
        Self {
            weights: vec![0.7, 0.2, 0.1],
            means: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.75f64.sqrt()]],
            covs: vec![
                [[0.030, 0.012], [0.012, 0.010]],
                [[0.008, -0.004], [-0.004, 0.020]],
                [[0.015, 0.0], [0.0, 0.004]],
            ],
        }
    }
}

/// Lower Cholesky factor `[l11, l21, l22]` of a 2x2 covariance.
fn cholesky(c: &[[f64; 2]; 2]) -> Option<[f64; 3]> {
    if c[0][1] != c[1][0] || !(c[0][0] > 0.0) {
        return None;
    }
    let l11 = c[0][0].sqrt();
    let l21 = c[1][0] / l11;
    let rest = c[1][1] - l21 * l21;
    if !(rest > 0.0) || !rest.is_finite() {
        return None;
    }
    Some([l11, l21, rest.sqrt()])
}

impl Gmm2d {
    /// Single standard-normal component.
    pub fn standard_normal() -> Self {
        Self {
            weights: vec![1.0],
            means: vec![[0.0, 0.0]],
            covs: vec![[[1.0, 0.0], [0.0, 1.0]]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covs.len() != k {
            return Err(Error::invalid("mixture needs matching weights, means and covariances"));
        }
        CategoricalDistribution::new(self.weights.clone())?;
        for (i, c) in self.covs.iter().enumerate() {
            if cholesky(c).is_none() {
                return Err(Error::invalid(format!(
                    "covariance {i} is not symmetric positive definite: {c:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    /// Log-density of component `k` at `(x, y)`.
    pub fn component_log_density(&self, k: usize, x: f64, y: f64) -> f64 {
        let c = &self.covs[k];
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let (dx, dy) = (x - self.means[k][0], y - self.means[k][1]);
        let quad = (c[1][1] * dx * dx - 2.0 * c[0][1] * dx * dy + c[0][0] * dy * dy) / det;
        -0.5 * quad - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln()
    }

    pub fn log_density(&self, x: f64, y: f64) -> f64 {
        let terms: Vec<f64> = (0..self.num_components())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x, y))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        self.log_density(x, y).exp()
    }

    /// Overall standard deviation of the mixture, averaged over both axes.
    pub fn std(&self) -> f64 {
        let mean: [f64; 2] = [0, 1].map(|a| (0..self.num_components()).map(|k| self.weights[k] * self.means[k][a]).sum());
        let var: f64 = (0..2)
            .map(|a| {
                (0..self.num_components())
                    .map(|k| self.weights[k] * (self.covs[k][a][a] + (self.means[k][a] - mean[a]).powi(2)))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 2.0;
        var.sqrt()
    }

    /// Draws `n` points; the label is the component index.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        let chol: Vec<[f64; 3]> = self.covs.iter().map(|c| cholesky(c).expect("validated")).collect();
        let comp = CategoricalDistribution::new(self.weights.clone())?;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = comp.sample(rng);
            let z0: f64 = StandardNormal.sample(rng);
            let z1: f64 = StandardNormal.sample(rng);
            let l = chol[k];
            data.push(self.means[k][0] + l[0] * z0);
            data.push(self.means[k][1] + l[1] * z0 + l[2] * z1);
            labels.push(k);
        }
        Ok((Tensor::matrix(n, 2, data)?, labels))
    }
}

/// First-order Markov chain over `V` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovChain {
    pub initial: Vec<f64>,
    /// `transition[a][b] = P(next = b | current = a)`.
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self> {
        let chain = Self { initial, transition };
        chain.validate()?;
        Ok(chain)
    }

    /// Chain with uniform start and rows drawn as a floor plus a
    /// flat-Dirichlet share, then sharpened by `exponent` and renormalised.
    pub fn random(vocab_size: usize, exponent: f64, rng: &mut impl Rng) -> Self {
        let transition = (0..vocab_size)
            .map(|_| {
                let row = CategoricalDistribution::random(vocab_size, 0.02, rng);
                let w: Vec<f64> = row.probs().iter().map(|p| p.powf(exponent)).collect();
                CategoricalDistribution::from_weights(&w)
                    .expect("positive weights")
                    .probs()
                    .to_vec()
            })
            .collect();
        Self {
            initial: vec![1.0 / vocab_size as f64; vocab_size],
            transition,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.initial.len();
        let stochastic = |row: &[f64]| {
            row.len() == v
                && row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if v == 0 || !stochastic(&self.initial) {
            return Err(Error::InvalidDistribution("initial distribution is not stochastic".into()));
        }
        if self.transition.len() != v {
            return Err(Error::InvalidDistribution(format!(
                "transition matrix has {} rows for {v} tokens",
                self.transition.len()
            )));
        }
        if let Some(i) = self.transition.iter().position(|r| !stochastic(r)) {
            return Err(Error::InvalidDistribution(format!("transition row {i} is not stochastic")));
        }
        Ok(())
    }

    pub fn log_pmf(&self, x: &[usize]) -> Result<f64> {
        let v = self.vocab_size();
        if let Some(&bad) = x.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfRange {
                what: "token",
                value: bad,
                limit: v,
            });
        }
        let Some(&first) = x.first() else {
            return Ok(0.0);
        };
        let mut lp = self.initial[first].ln();
        for w in x.windows(2) {
            lp += self.transition[w[0]][w[1]].ln();
        }
        Ok(lp)
    }

    /// Exact pmf over all `V^d` sequences, in the lexicographic order of
    /// [`ArModel::sequence_at`].
    pub fn distribution(&self, seq_len: usize) -> Result<CategoricalDistribution> {
        let v = self.vocab_size();
        let size = (0..seq_len)
            .try_fold(1usize, |acc, _| acc.checked_mul(v))
            .filter(|&s| s <= 10_000)
            .ok_or_else(|| Error::invalid("exact pmf requires V^d ≤ 10^4"))?;
        let mut probs = Vec::with_capacity(size);
        let mut x = vec![0usize; seq_len];
        for i in 0..size {
            let mut r = i;
            for n in (0..seq_len).rev() {
                x[n] = r % v;
                r /= v;
            }
            debug_assert_eq!(ArModel::sequence_index(v, &x), i);
            probs.push(self.log_pmf(&x)?.exp());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("chain pmf sums to {total}")));
        }
        // absorb the roundoff left by the product of normalised rows
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        if (probs.iter().sum::<f64>() - 1.0).abs() > NORMALIZATION_TOL {
            return CategoricalDistribution::from_weights(&probs);
        }
        CategoricalDistribution::new(probs)
    }

    pub fn sample(&self, seq_len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut x = Vec::with_capacity(seq_len);
        let mut row = &self.initial;
        for _ in 0..seq_len {
            let t = sample_row(row, rng);
            x.push(t);
            row = &self.transition[t];
        }
        x
    }
}

fn sample_row(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Every generator the runner can draw a dataset from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticTarget {
    Gmm2d {
        #[serde(flatten)]
        mixture: Gmm2d,
    },
    TwoMoons {
        noise: f64,
    },
    MarkovChain {
        seq_len: usize,
        #[serde(flatten)]
        chain: MarkovChain,
    },
    /// One chain per class; labels are drawn uniformly.
    ConditionalMarkov {
        seq_len: usize,
        chains: Vec<MarkovChain>,
    },
    Categorical {
        probs: Vec<f64>,
    },
}

impl SyntheticTarget {
    pub fn validate(&self) -> Result<()> {
        match self {
            SyntheticTarget::Gmm2d { mixture } => mixture.validate(),
            SyntheticTarget::TwoMoons { noise } => {
                if noise.is_finite() && *noise >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("two-moons noise {noise}")))
                }
            }
            SyntheticTarget::MarkovChain { chain, .. } => chain.validate(),
            SyntheticTarget::ConditionalMarkov { chains, .. } => {
                if chains.is_empty() {
                    return Err(Error::invalid("conditional target needs at least one chain"));
                }
                let v = chains[0].vocab_size();
                for c in chains {
                    c.validate()?;
                    if c.vocab_size() != v {
                        return Err(Error::invalid("chains disagree on vocabulary size"));
                    }
                }
                Ok(())
            }
            SyntheticTarget::Categorical { probs } => CategoricalDistribution::new(probs.clone()).map(|_| ()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SyntheticTarget::Gmm2d { mixture } => mixture.num_components(),
            SyntheticTarget::TwoMoons { .. } => 2,
            SyntheticTarget::ConditionalMarkov { chains, .. } => chains.len(),
            _ => 0,
        }
    }

    /// Exact pmf over the whole discrete domain (unconditional marginal for
    /// conditional targets).
    pub fn exact_pmf(&self) -> Result<CategoricalDistribution> {
        match self {
            SyntheticTarget::MarkovChain { seq_len, chain } => chain.distribution(*seq_len),
            SyntheticTarget::ConditionalMarkov { seq_len, chains } => {
                let parts = chains
                    .iter()
                    .map(|c| c.distribution(*seq_len))
                    .collect::<Result<Vec<_>>>()?;
                let k = parts.len() as f64;
                let w: Vec<f64> = (0..parts[0].len())
                    .map(|i| parts.iter().map(|p| p.prob(i)).sum::<f64>() / k)
                    .collect();
                CategoricalDistribution::from_weights(&w)
            }
            SyntheticTarget::Categorical { probs } => CategoricalDistribution::new(probs.clone()),
            _ => Err(Error::invalid("target has no discrete pmf")),
        }
    }

    /// Draws `n` items with a generator seeded by `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = seeded(seed);
        let (items, labels) = match self {
            SyntheticTarget::Gmm2d { mixture } => {
                let (x, l) = mixture.sample(n, &mut rng)?;
                (Items::Points(x), l.into_iter().map(Some).collect())
            }
            SyntheticTarget::TwoMoons { noise } => {
                let mut data = Vec::with_capacity(2 * n);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let upper = rng.random::<bool>();
                    let a = std::f64::consts::PI * rng.random::<f64>();
                    let (x, y) = if upper {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    };
                    let zx: f64 = StandardNormal.sample(&mut rng);
                    let zy: f64 = StandardNormal.sample(&mut rng);
                    data.push(x + noise * zx);
                    data.push(y + noise * zy);
                    labels.push(Some(usize::from(!upper)));
                }
                (Items::Points(Tensor::matrix(n, 2, data)?), labels)
            }
            SyntheticTarget::MarkovChain { seq_len, chain } => {
                let seqs = (0..n).map(|_| chain.sample(*seq_len, &mut rng)).collect();
                (Items::Sequences(seqs), vec![None; n])
            }
            SyntheticTarget::ConditionalMarkov { seq_len, chains } => {
                let mut seqs = Vec::with_capacity(n);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = rng.random_range(0..chains.len());
                    seqs.push(chains[c].sample(*seq_len, &mut rng));
                    labels.push(Some(c));
                }
                (Items::Sequences(seqs), labels)
            }
            SyntheticTarget::Categorical { probs } => {
                let d = CategoricalDistribution::new(probs.clone())?;
                ((Items::States((0..n).map(|_| d.sample(&mut rng)).collect())), vec![None; n])
            }
        };
        Ok(Dataset {
            items,
            labels,
            provenance: Provenance {
                target: self.clone(),
                n_samples: n,
                seed,
            },
        })
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub target: SyntheticTarget,
    pub n_samples: usize,
    pub seed: u64,
}

impl Provenance {
    pub fn regenerate(&self) -> Result<Dataset> {
        self.target.generate(self.n_samples, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Items {
    /// `[n, dim]` continuous points.
    Points(Tensor),
    Sequences(Vec<Vec<usize>>),
    States(Vec<usize>),
}

impl Items {
    pub fn len(&self) -> usize {
        match self {
            Items::Points(t) => t.shape()[0],
            Items::Sequences(s) => s.len(),
            Items::States(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            Items::Points(_) => "points",
            Items::Sequences(_) => "sequences",
            Items::States(_) => "states",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Items,
    pub labels: Vec<Option<usize>>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    items: String,
    provenance: Provenance,
}

fn to_index(v: f64, what: &'static str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what} entry {v} is not an index")))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Serialises into the checkpoint container with kind `dataset`. Items
    /// become one tensor, labels a second one with `-1` for no label.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let n = self.len();
        let items = match &self.items {
            Items::Points(t) => t.clone(),
            Items::Sequences(s) => {
                let d = s.first().map_or(0, Vec::len);
                if s.iter().any(|x| x.len() != d) {
                    return Err(Error::invalid("sequences of unequal length"));
                }
                Tensor::matrix(n, d, s.iter().flatten().map(|&t| t as f64).collect())?
            }
            Items::States(s) => Tensor::vector(s.iter().map(|&x| x as f64).collect()),
        };
        let labels = Tensor::vector(self.labels.iter().map(|l| l.map_or(-1.0, |c| c as f64)).collect());
        let header = serde_json::to_value(DatasetHeader {
            items: self.items.kind().to_string(),
            provenance: self.provenance.clone(),
        })?;
        Ok(Checkpoint::new("dataset", header, vec![items, labels], self.provenance.seed, 0))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.kind != "dataset" || ckpt.tensors.len() != 2 {
            return Err(Error::Checkpoint(format!("not a dataset: kind {:?}", ckpt.header.kind)));
        }
        let header: DatasetHeader = serde_json::from_value(ckpt.header.config.clone())?;
        let (items, labels) = (&ckpt.tensors[0], &ckpt.tensors[1]);
        let items = match header.items.as_str() {
            "points" => Items::Points(items.clone()),
            "sequences" => {
                let d = items.shape().get(1).copied().unwrap_or(0);
                let flat = items
                    .data()
                    .iter()
                    .map(|&v| to_index(v, "token"))
                    .collect::<Result<Vec<_>>>()?;
                Items::Sequences(if d == 0 {
                    vec![Vec::new(); items.shape()[0]]
                } else {
                    flat.chunks(d).map(<[usize]>::to_vec).collect()
                })
            }
            "states" => Items::States(
                items
                    .data()
                    .iter()
                    .map(|&v| to_index(v, "state"))
                    .collect::<Result<Vec<_>>>()?,
            ),
            other => return Err(Error::Checkpoint(format!("unknown item kind {other:?}"))),
        };
        let labels = labels
            .data()
            .iter()
            .map(|&v| if v == -1.0 { Ok(None) } else { to_index(v, "label").map(Some) })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != items.len() {
            return Err(Error::Checkpoint("label count differs from item count".into()));
        }
        Ok(Self {
            items,
            labels,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let ckpt = self.to_checkpoint()?;
        ckpt.write(path)?;
        ckpt.digest()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

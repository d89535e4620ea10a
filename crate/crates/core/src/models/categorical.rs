use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::LikelihoodModel;
use crate::error::{Error, Result};
use crate::grad::{self, Tape, Tensor, Var};

/// Tolerance on `Σ p = 1` for an explicit probability vector.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Explicit probability vector over `K` states.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {p}, expected a finite nonnegative value"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalises nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "cannot normalise weights with total {total}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    /// Normalises `exp(log_weights)` with a max shift.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("log-weights"));
        }
        let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
        Self::from_weights(&w)
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// Random distribution with every entry at least `min_entry`: the floor
    /// plus a flat-Dirichlet share of the remaining mass.
    pub fn random(k: usize, min_entry: f64, rng: &mut impl Rng) -> Self {
        assert!(k >= 1 && min_entry * k as f64 <= 1.0);
        let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        let free = 1.0 - min_entry * k as f64;
        let mut probs: Vec<f64> = g.iter().map(|x| min_entry + free * x / total).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, x: usize) -> f64 {
        self.probs[x]
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn require_full_support(&self, which: &'static str) -> Result<()> {
        match self.probs.iter().position(|&p| p <= 0.0) {
            Some(index) => Err(Error::SupportViolation { which, index }),
            None => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the last cumulative sum
        self.probs
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.probs.len() - 1)
    }

    /// Empirical distribution of `samples` over `k` states.
    pub fn empirical(samples: &[usize], k: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empirical distribution of zero samples"));
        }
        let mut counts = vec![0.0; k];
        for &s in samples {
            if s >= k {
                return Err(Error::OutOfRange {
                    what: "state",
                    value: s,
                    limit: k,
                });
            }
            counts[s] += 1.0;
        }
        Self::from_weights(&counts)
    }
}

/// Full-capacity softmax parameterisation over `K` states.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalModel {
    params: Vec<Tensor>,
}

impl CategoricalModel {
    pub fn new(logits: Vec<f64>) -> Self {
        Self {
            params: vec![Tensor::vector(logits)],
        }
    }

    pub fn uniform(k: usize) -> Self {
        Self::new(vec![0.0; k])
    }

    pub fn from_distribution(dist: &CategoricalDistribution) -> Result<Self> {
        dist.require_full_support("distribution")?;
        Ok(Self::new(dist.log_probs()))
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn logits(&self) -> &[f64] {
        self.params[0].data()
    }

    pub fn num_states(&self) -> usize {
        self.params[0].len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let l = self.logits();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        l.iter().map(|v| v - lse).collect()
    }

    pub fn distribution(&self) -> CategoricalDistribution {
        let lp = self.log_probs();
        let mut p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        CategoricalDistribution { probs: p }
    }

    /// `log softmax(logits)[x]`.
    pub fn log_prob(&self, x: usize) -> Result<f64> {
        let k = self.num_states();
        if x >= k {
            return Err(Error::OutOfRange {
                what: "state",
                value: x,
                limit: k,
            });
        }
        Ok(self.log_probs()[x])
    }

    /// Log-softmax of the logits variable, shape `[K]`.
    pub fn log_probs_taped(tape: &mut Tape, logits: Var) -> grad::Result<Var> {
        tape.log_softmax(logits)
    }
}

impl LikelihoodModel for CategoricalModel {
    type Item = usize;

    fn num_classes(&self) -> usize {
        0
    }

    fn log_prob_taped(
        &self,
        tape: &mut Tape,
        params: &[Var],
        items: &[usize],
        _labels: &[Option<usize>],
    ) -> Result<Var> {
        let k = self.num_states();
        if let Some(&bad) = items.iter().find(|&&x| x >= k) {
            return Err(Error::OutOfRange {
                what: "state",
                value: bad,
                limit: k,
            });
        }
        let lp = tape.log_softmax(params[0])?;
        Ok(tape.take(lp, items)?)
    }

    fn log_prob_batch(&self, items: &[usize], _labels: &[Option<usize>]) -> Result<Vec<f64>> {
        let lp = self.log_probs();
        items
            .iter()
            .map(|&x| {
                lp.get(x).copied().ok_or(Error::OutOfRange {
                    what: "state",
                    value: x,
                    limit: lp.len(),
                })
            })
            .collect()
    }

    fn sample(&self, _label: Option<usize>, rng: &mut crate::rng::Rng) -> usize {
        self.distribution().sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_uniform_log_prob() {
        let m = CategoricalModel::new(vec![0.3; 4]);
        for x in 0..4 {
            assert!((m.log_prob(x).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_logits_are_returned_unchanged() {
        let m = CategoricalModel::new(vec![0.7f64.ln(), 0.3f64.ln()]);
        assert!((m.log_prob(0).unwrap() - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_probs_normalise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..9).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = CategoricalModel::new(logits);
            let total: f64 = (0..9).map(|x| m.log_prob(x).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let m = CategoricalModel::uniform(3);
        assert!(matches!(m.log_prob(3), Err(Error::OutOfRange { value: 3, limit: 3, .. })));
    }

    #[test]
    fn distribution_validation() {
        assert!(CategoricalDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(CategoricalDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(CategoricalDistribution::new(vec![0.5, 0.5]).is_ok());
        let d = CategoricalDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            d.require_full_support("p_data"),
            Err(Error::SupportViolation { index: 1, .. })
        ));
    }

    #[test]
    fn random_distributions_respect_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [2, 8, 16] {
            let d = CategoricalDistribution::random(k, 0.01, &mut rng);
            assert!(d.probs().iter().all(|&p| p >= 0.01 - 1e-15));
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

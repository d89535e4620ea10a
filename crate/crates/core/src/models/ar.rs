use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_label, CategoricalDistribution, LikelihoodModel};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// 0 for an unconditional model.
    #[serde(default)]
    pub num_classes: usize,
    pub hidden: usize,
}

impl ArConfig {
    /// Rows of the shared embedding table: one per position, one per
    /// (position, token) context pair, one per class plus the null label.
    fn embed_rows(&self) -> usize {
        self.seq_len + self.seq_len * self.vocab_size + self.num_classes + 1
    }

    fn null_row(&self) -> usize {
        self.seq_len + self.seq_len * self.vocab_size + self.num_classes
    }

    pub fn domain_size(&self) -> Option<usize> {
        let mut n: usize = 1;
        for _ in 0..self.seq_len {
            n = n.checked_mul(self.vocab_size)?;
        }
        Some(n)
    }
}

/// Autoregressive sequence model. The conditional at position `n` is
///
/// `softmax(W tanh(b + P[n] + Σ_{j<n} C[j, x_j] + L[label]) + c)`
///
/// with `P`, `C`, `L` rows of one embedding table, so the context enters as
/// a position-wise embedding sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ArModel {
    config: ArConfig,
    params: Vec<Tensor>,
}

const EMBED: usize = 0;
const HIDDEN_BIAS: usize = 1;
const OUT_W: usize = 2;
const OUT_B: usize = 3;

impl ArModel {
    pub fn param_shapes(config: &ArConfig) -> Vec<Vec<usize>> {
        vec![
            vec![config.embed_rows(), config.hidden],
            vec![config.hidden],
            vec![config.hidden, config.vocab_size],
            vec![config.vocab_size],
        ]
    }

    fn validate(config: &ArConfig) -> Result<()> {
        if config.vocab_size < 1 || config.seq_len < 1 || config.hidden < 1 {
            return Err(Error::invalid(format!(
                "AR model needs positive vocab, length and width: {config:?}"
            )));
        }
        Ok(())
    }

    /// All-zero parameters: every conditional is uniform.
    pub fn zeros(config: ArConfig) -> Result<Self> {
        Self::validate(&config)?;
        let params = Self::param_shapes(&config)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Ok(Self { config, params })
    }

    pub fn init(config: ArConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let embed = Normal::new(0.0, 0.5).expect("valid normal");
        let out = Normal::new(0.0, 1.0 / (config.hidden as f64).sqrt()).expect("valid normal");
        m.params[EMBED]
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = embed.sample(rng));
        m.params[OUT_W]
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = out.sample(rng));
        Ok(m)
    }

    pub fn from_params(config: ArConfig, params: Vec<Tensor>) -> Result<Self> {
        Self::validate(&config)?;
        let shapes = Self::param_shapes(&config);
        if params.len() != shapes.len()
            || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::Checkpoint(format!(
                "parameter shapes do not match AR config {config:?}"
            )));
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn config(&self) -> &ArConfig {
        &self.config
    }

    fn label_row(&self, label: Option<usize>) -> usize {
        match label {
            Some(c) => self.config.seq_len + self.config.seq_len * self.config.vocab_size + c,
            None => self.config.null_row(),
        }
    }

    fn validate_item(&self, x: &[usize], label: Option<usize>) -> Result<()> {
        if x.len() != self.config.seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} != model length {}",
                x.len(),
                self.config.seq_len
            )));
        }
        if let Some(&t) = x.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token",
                value: t,
                limit: self.config.vocab_size,
            });
        }
        check_label(label, self.config.num_classes)
    }

    /// Logits of the conditional at position `prefix.len()`.
    pub fn conditional_logits(&self, prefix: &[usize], label: Option<usize>) -> Vec<f64> {
        let ArConfig {
            vocab_size: v,
            seq_len: d,
            hidden: h,
            ..
        } = self.config;
        let n = prefix.len();
        let e = self.params[EMBED].data();
        let row = |r: usize| &e[r * h..(r + 1) * h];
        let mut pre: Vec<f64> = self.params[HIDDEN_BIAS].data().to_vec();
        let mut add = |r: &[f64]| pre.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        add(row(n));
        for (j, &t) in prefix.iter().enumerate() {
            add(row(d + j * v + t));
        }
        add(row(self.label_row(label)));
        let hid: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        let w = self.params[OUT_W].data();
        let mut logits = self.params[OUT_B].data().to_vec();
        for (k, hk) in hid.iter().enumerate() {
            for (o, wv) in logits.iter_mut().zip(&w[k * v..(k + 1) * v]) {
                *o += hk * wv;
            }
        }
        logits
    }

    /// Exact `log p(x | label) = Σ_n log p(x_n | x_<n, label)`.
    pub fn log_prob(&self, x: &[usize], label: Option<usize>) -> Result<f64> {
        self.validate_item(x, label)?;
        let mut total = 0.0;
        for n in 0..x.len() {
            let logits = self.conditional_logits(&x[..n], label);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += logits[x[n]] - lse;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("ar log-likelihood"));
        }
        Ok(total)
    }

    /// Sequence with flat index `i` in lexicographic order (first token most significant).
    pub fn sequence_at(&self, mut i: usize) -> Vec<usize> {
        let (v, d) = (self.config.vocab_size, self.config.seq_len);
        let mut x = vec![0; d];
        for n in (0..d).rev() {
            x[n] = i % v;
            i /= v;
        }
        x
    }

    pub fn sequence_index(vocab_size: usize, x: &[usize]) -> usize {
        x.iter().fold(0, |acc, &t| acc * vocab_size + t)
    }

    /// Exact distribution over all `V^d` sequences in lexicographic order.
    pub fn enumerate(&self, label: Option<usize>) -> Result<CategoricalDistribution> {
        let n = self
            .config
            .domain_size()
            .filter(|&n| n <= 1 << 20)
            .ok_or_else(|| Error::invalid("sequence space too large to enumerate"))?;
        let lp = (0..n)
            .map(|i| self.log_prob(&self.sequence_at(i), label))
            .collect::<Result<Vec<_>>>()?;
        CategoricalDistribution::from_log_weights(&lp)
    }

    /// Ancestral sampling with externally supplied logits adjustment per step
    /// (identity for plain sampling).
    pub fn sample_with(
        &self,
        rng: &mut impl Rng,
        mut logits_at: impl FnMut(&[usize]) -> Vec<f64>,
    ) -> Vec<usize> {
        let mut x = Vec::with_capacity(self.config.seq_len);
        for _ in 0..self.config.seq_len {
            let logits = logits_at(&x);
            let dist = CategoricalDistribution::from_log_weights(&logits)
                .unwrap_or_else(|_| CategoricalDistribution::uniform(logits.len()));
            x.push(dist.sample(rng));
        }
        x
    }
}

impl LikelihoodModel for ArModel {
    type Item = Vec<usize>;

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn log_prob_taped(
        &self,
        tape: &mut Tape,
        params: &[Var],
        items: &[Vec<usize>],
        labels: &[Option<usize>],
    ) -> Result<Var> {
        if items.len() != labels.len() {
            return Err(Error::invalid("items and labels differ in length"));
        }
        if items.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let ArConfig {
            vocab_size: v,
            seq_len: d,
            ..
        } = self.config;
        let rows = self.config.embed_rows();
        let b = items.len();
        let mut design = vec![0.0; b * d * rows];
        let mut targets = Vec::with_capacity(b * d);
        for (i, (x, &label)) in items.iter().zip(labels).enumerate() {
            self.validate_item(x, label)?;
            let label_row = self.label_row(label);
            for n in 0..d {
                let r = &mut design[(i * d + n) * rows..(i * d + n + 1) * rows];
                r[n] = 1.0;
                for (j, &t) in x[..n].iter().enumerate() {
                    r[d + j * v + t] += 1.0;
                }
                r[label_row] = 1.0;
                targets.push(x[n]);
            }
        }
        let design = tape.leaf(Tensor::matrix(b * d, rows, design)?)?;
        let pre = tape.affine(design, params[EMBED], params[HIDDEN_BIAS])?;
        let hid = tape.tanh(pre)?;
        let logits = tape.affine(hid, params[OUT_W], params[OUT_B])?;
        let lp = tape.log_softmax(logits)?;
        let picked = tape.gather_rows(lp, &targets)?;
        let per_seq = tape.reshape(picked, &[b, d])?;
        Ok(tape.sum_axis(per_seq, 1)?)
    }

    fn log_prob_batch(&self, items: &[Vec<usize>], labels: &[Option<usize>]) -> Result<Vec<f64>> {
        if items.len() != labels.len() {
            return Err(Error::invalid("items and labels differ in length"));
        }
        items
            .iter()
            .zip(labels)
            .map(|(x, &l)| self.log_prob(x, l))
            .collect()
    }

    fn sample(&self, label: Option<usize>, rng: &mut crate::rng::Rng) -> Vec<usize> {
        self.sample_with(rng, |prefix| self.conditional_logits(prefix, label))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CategoricalModel;
    use crate::rng::seeded;

    fn cfg(v: usize, d: usize) -> ArConfig {
        ArConfig {
            vocab_size: v,
            seq_len: d,
            num_classes: 0,
            hidden: 6,
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ArModel::zeros(cfg(5, 3)).unwrap();
        let lp = m.log_prob(&[4, 0, 2], None).unwrap();
        assert!((lp - 3.0 * (0.2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_reduces_to_categorical() {
        let mut rng = seeded(1);
        let m = ArModel::init(cfg(4, 1), &mut rng).unwrap();
        let cat = CategoricalModel::new(m.conditional_logits(&[], None));
        for x in 0..4 {
            assert!((m.log_prob(&[x], None).unwrap() - cat.log_prob(x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_normalisation() {
        let mut rng = seeded(2);
        let m = ArModel::init(cfg(3, 3), &mut rng).unwrap();
        let total: f64 = (0..27)
            .map(|i| m.log_prob(&m.sequence_at(i), None).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn taped_and_direct_log_probs_agree() {
        let mut rng = seeded(3);
        let config = ArConfig {
            vocab_size: 3,
            seq_len: 4,
            num_classes: 2,
            hidden: 5,
        };
        let m = ArModel::init(config, &mut rng).unwrap();
        let items = vec![vec![0, 1, 2, 0], vec![2, 2, 1, 1], vec![1, 0, 0, 2]];
        let labels = vec![Some(0), None, Some(1)];
        let mut tape = Tape::new();
        let pv = crate::models::record_params(&mut tape, m.params()).unwrap();
        let out = m.log_prob_taped(&mut tape, &pv, &items, &labels).unwrap();
        let direct = m.log_prob_batch(&items, &labels).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let m = ArModel::zeros(cfg(3, 2)).unwrap();
        assert!(matches!(
            m.log_prob(&[0, 3], None),
            Err(Error::OutOfRange { what: "token", .. })
        ));
        assert!(matches!(
            m.log_prob(&[0, 1], Some(0)),
            Err(Error::OutOfRange { what: "label", .. })
        ));
        assert!(m.log_prob(&[0], None).is_err());
    }

    #[test]
    fn uniform_binary_sampling_frequency() {
        let m = ArModel::zeros(cfg(2, 1)).unwrap();
        let mut rng = seeded(4);
        let n = 100_000;
        let zeros = (0..n).filter(|_| m.sample(None, &mut rng)[0] == 0).count();
        let f = zeros as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "{f}");
    }

    #[test]
    fn peaked_model_samples_argmax() {
        let mut m = ArModel::zeros(cfg(3, 3)).unwrap();
        m.params_mut()[OUT_B].data_mut().copy_from_slice(&[0.0, 50.0, 0.0]);
        let mut rng = seeded(5);
        for _ in 0..100 {
            assert_eq!(m.sample(None, &mut rng), vec![1, 1, 1]);
        }
    }

    #[test]
    fn empirical_matches_enumeration() {
        let mut rng = seeded(6);
        let m = ArModel::init(cfg(3, 2), &mut rng).unwrap();
        let exact = m.enumerate(None).unwrap();
        let n = 100_000;
        let draws: Vec<usize> = (0..n)
            .map(|_| ArModel::sequence_index(3, &m.sample(None, &mut rng)))
            .collect();
        let emp = CategoricalDistribution::empirical(&draws, 9).unwrap();
        let tv: f64 = 0.5
            * emp
                .probs()
                .iter()
                .zip(exact.probs())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        assert!(tv < 0.02, "{tv}");
    }
}

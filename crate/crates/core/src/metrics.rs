//! Divergences between explicit distributions, the divergence bounds of the
//! plain objective, guidance composition, and a histogram divergence for 2-D
//! samples.

use serde::Serialize;

use crate::ddo::{ddo_loss_exact, ddo_optimal_loss};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::models::{ArModel, CategoricalDistribution, CategoricalModel};

fn same_len(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<()> {
    if p.len() == q.len() {
        Ok(())
    } else {
        Err(Error::invalid(format!("distributions over {} and {} states", p.len(), q.len())))
    }
}

/// `KL(p ‖ q)`; `q` must have full support.
pub fn kl(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    same_len(p, q)?;
    q.require_full_support("q")?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0))
}

/// `KL(q ‖ p)`; `p` must have full support.
pub fn reverse_kl(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    kl(q, p)
}

/// Jensen-Shannon divergence, `½ KL(p ‖ m) + ½ KL(q ‖ m)` with `m = (p+q)/2`.
pub fn js(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    same_len(p, q)?;
    let half_kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(ai, _)| **ai > 0.0)
            .map(|(ai, bi)| ai * (2.0 * ai / (ai + bi)).ln())
            .sum::<f64>()
    };
    Ok((0.5 * half_kl(p.probs(), q.probs()) + 0.5 * half_kl(q.probs(), p.probs())).max(0.0))
}

/// Total variation, half the L1 distance.
pub fn tv(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    same_len(p, q)?;
    Ok(0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn mixture(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<CategoricalDistribution> {
    CategoricalDistribution::from_weights(&p.probs().iter().zip(q.probs()).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>())
}

/// Constants of the upper bounds on both KL directions in terms of the loss
/// gap, from bounds `|log(p_θ/p_ref)| ≤ M` and `M1 ≤ log(p_ref/p_data) ≤ M2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DivergenceBoundConstants {
    pub m: f64,
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
    pub c2: f64,
}

impl DivergenceBoundConstants {
    /// `C1² = 2 max{k/(1+e^{M1}), 1+e^{-M1}}` and
    /// `C2² = 2 e^M max{k/(1+e^{-M2}), 1+e^{M2}}` with `k = 2+e^M+e^{-M}`.
    /// Per state, `p_θ(log p_θ/p_data)²` is at most `2 (p_θ/p_ref)` times
    /// `max{k/(1+p_data/p_ref), 1+p_ref/p_data}` times the pointwise loss gap,
    /// and `p_ref/p_data ≤ e^{M2}` bounds both entries from above.
    pub fn from_bounds(m: f64, m1: f64, m2: f64) -> Self {
        let core = 2.0 + (-m).exp() + m.exp();
        let c1 = (2.0 * f64::max(core / (1.0 + m1.exp()), 1.0 + (-m1).exp())).sqrt();
        let c2 = (2.0 * m.exp() * f64::max(core / (1.0 + (-m2).exp()), 1.0 + m2.exp())).sqrt();
        Self { m, m1, m2, c1, c2 }
    }

    /// `C2` with the sign of `M2` flipped in both entries. Never larger than
    /// the valid constant (`M2 ≥ 0` for normalised pairs) and violated on some
    /// instances; reported for comparison only.
    pub fn c2_mirrored(&self) -> f64 {
        let core = 2.0 + (-self.m).exp() + self.m.exp();
        (2.0 * self.m.exp() * f64::max(core / (1.0 + self.m2.exp()), 1.0 + (-self.m2).exp())).sqrt()
    }

    /// Tightest bounds valid for the given instance.
    pub fn from_instance(
        p_data: &CategoricalDistribution,
        p_ref: &CategoricalDistribution,
        p_theta: &CategoricalDistribution,
    ) -> Result<Self> {
        same_len(p_data, p_ref)?;
        same_len(p_data, p_theta)?;
        p_data.require_full_support("p_data")?;
        p_ref.require_full_support("p_ref")?;
        p_theta.require_full_support("p_theta")?;
        let m = p_theta
            .probs()
            .iter()
            .zip(p_ref.probs())
            .map(|(t, r)| (t / r).ln().abs())
            .fold(0.0, f64::max);
        let ratios: Vec<f64> = p_ref.probs().iter().zip(p_data.probs()).map(|(r, d)| (r / d).ln()).collect();
        let m1 = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let m2 = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::from_bounds(m, m1, m2))
    }
}

/// Roundoff allowance when comparing both sides of a bound.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem2Report {
    pub kl_forward: f64,
    pub kl_reverse: f64,
    /// `L(θ) - L*` evaluated directly.
    pub loss_gap: f64,
    /// `KL(p_data ‖ p_θ) - 2 KL(m_data ‖ m_θ)` with `m_· = (p_· + p_ref)/2`.
    pub loss_gap_identity: f64,
    pub identity_error: f64,
    pub constants: DivergenceBoundConstants,
    pub forward_bound: f64,
    pub reverse_bound: f64,
    pub forward_pass: bool,
    pub reverse_pass: bool,
    pub lower_bound_pass: bool,
}

impl Theorem2Report {
    pub fn passed(&self) -> bool {
        self.forward_pass && self.reverse_pass && self.lower_bound_pass
    }
}

/// `L(θ) - L*` and the mixture-KL identity for it. The mixture term carries
/// a factor 2 because `p_data + p_ref = 2 m_data` weights the log-ratio of the
/// mixtures.
pub fn loss_gap(
    p_data: &CategoricalDistribution,
    p_ref: &CategoricalDistribution,
    p_theta: &CategoricalDistribution,
) -> Result<(f64, f64)> {
    let model = CategoricalModel::from_distribution(p_theta)?;
    let gap = ddo_loss_exact(&model, p_ref, p_data)? - ddo_optimal_loss(p_ref, p_data)?;
    let identity = kl(p_data, p_theta)? - 2.0 * kl(&mixture(p_data, p_ref)?, &mixture(p_theta, p_ref)?)?;
    Ok((gap, identity))
}

/// Checks `KL(p_data‖p_θ) ≤ C1 √(L-L*)`, `KL(p_θ‖p_data) ≤ C2 √(L-L*)` and
/// `L-L* ≤ KL(p_data‖p_θ)` on one instance, with instance-exact constants.
pub fn verify_theorem2(
    p_data: &CategoricalDistribution,
    p_ref: &CategoricalDistribution,
    p_theta: &CategoricalDistribution,
) -> Result<Theorem2Report> {
    let constants = DivergenceBoundConstants::from_instance(p_data, p_ref, p_theta)?;
    let (gap, identity) = loss_gap(p_data, p_ref, p_theta)?;
    let kl_forward = kl(p_data, p_theta)?;
    let kl_reverse = kl(p_theta, p_data)?;
    let root = gap.max(0.0).sqrt();
    let forward_bound = constants.c1 * root;
    let reverse_bound = constants.c2 * root;
    Ok(Theorem2Report {
        kl_forward,
        kl_reverse,
        loss_gap: gap,
        loss_gap_identity: identity,
        identity_error: (gap - identity).abs(),
        constants,
        forward_bound,
        reverse_bound,
        forward_pass: kl_forward <= forward_bound + BOUND_SLACK,
        reverse_pass: kl_reverse <= reverse_bound + BOUND_SLACK,
        lower_bound_pass: gap <= kl_forward + BOUND_SLACK,
    })
}

/// Normalised `p (p/q)^w`: sharpens `base` away from `degraded`.
pub fn guide_compose(
    base: &CategoricalDistribution,
    degraded: &CategoricalDistribution,
    w: f64,
) -> Result<CategoricalDistribution> {
    same_len(base, degraded)?;
    base.require_full_support("base")?;
    degraded.require_full_support("degraded")?;
    if !w.is_finite() {
        return Err(Error::invalid(format!("guidance scale {w}")));
    }
    let lw: Vec<f64> = base
        .probs()
        .iter()
        .zip(degraded.probs())
        .map(|(p, q)| (1.0 + w) * p.ln() - w * q.ln())
        .collect();
    if lw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow("guide_compose"));
    }
    CategoricalDistribution::from_log_weights(&lw)
}

/// Classifier-free guidance on denoiser, score or logit outputs:
/// `s_c + w (s_c - s_u)`.
pub fn cfg_score(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Grad(crate::grad::GradError::ShapeMismatch {
            op: "cfg_score",
            left: cond.shape().to_vec(),
            right: uncond.shape().to_vec(),
        }));
    }
    let data = cond.data().iter().zip(uncond.data()).map(|(c, u)| c + w * (c - u)).collect();
    Ok(Tensor::new(cond.shape().to_vec(), data)?)
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Guided next-token log-probabilities: the log-probabilities are composed
/// with [`cfg_score`] and renormalised.
pub fn cfg_log_probs(cond_logits: &[f64], uncond_logits: &[f64], w: f64) -> Result<Vec<f64>> {
    let c = Tensor::vector(log_softmax(cond_logits));
    let u = Tensor::vector(log_softmax(uncond_logits));
    Ok(log_softmax(cfg_score(&c, &u, w)?.data()))
}

/// Guided ancestral sample from a conditional AR model.
pub fn ar_cfg_sample(model: &ArModel, label: usize, w: f64, rng: &mut crate::rng::Rng) -> Result<Vec<usize>> {
    crate::models::check_label(Some(label), model.config().num_classes)?;
    Ok(model.sample_with(rng, |prefix| {
        let c = model.conditional_logits(prefix, Some(label));
        let u = model.conditional_logits(prefix, None);
        cfg_log_probs(&c, &u, w).expect("equal vocab sizes")
    }))
}

/// Exact distribution of [`ar_cfg_sample`] over the whole sequence space.
pub fn ar_cfg_distribution(model: &ArModel, label: usize, w: f64) -> Result<CategoricalDistribution> {
    crate::models::check_label(Some(label), model.config().num_classes)?;
    let size = model
        .config()
        .domain_size()
        .ok_or_else(|| Error::invalid("sequence space too large to enumerate"))?;
    let mut lw = Vec::with_capacity(size);
    for i in 0..size {
        let x = model.sequence_at(i);
        let mut total = 0.0;
        for n in 0..x.len() {
            let c = model.conditional_logits(&x[..n], Some(label));
            let u = model.conditional_logits(&x[..n], None);
            total += cfg_log_probs(&c, &u, w)?[x[n]];
        }
        lw.push(total);
    }
    CategoricalDistribution::from_log_weights(&lw)
}

pub fn entropy(p: &CategoricalDistribution) -> f64 {
    -p.probs().iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Axis-aligned box split into `nx × ny` equal cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub const DEFAULT_CELLS: usize = 64;
    pub const DEFAULT_HALF_WIDTH: f64 = 4.0;

    /// Default `64 × 64` grid over per-axis mean ± 4 std of the points.
    pub fn around(points: &Tensor) -> Result<Self> {
        let n = points.shape()[0];
        if points.shape().len() != 2 || points.shape()[1] != 2 || n < 2 {
            return Err(Error::invalid("need at least two 2-D points"));
        }
        let mut bounds = [(0.0, 0.0); 2];
        for (axis, b) in bounds.iter_mut().enumerate() {
            let vals: Vec<f64> = (0..n).map(|i| points.row(i)[axis]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let half = Self::DEFAULT_HALF_WIDTH * var.sqrt();
            *b = (mean - half, mean + half);
        }
        let spec = Self {
            x_min: bounds[0].0,
            x_max: bounds[0].1,
            y_min: bounds[1].0,
            y_max: bounds[1].1,
            nx: Self::DEFAULT_CELLS,
            ny: Self::DEFAULT_CELLS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(Error::invalid(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Centre of cell `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.dx(),
            self.y_min + (iy as f64 + 0.5) * self.dy(),
        )
    }

    /// Cell of a point, clamped into the box; the flag reports clamping.
    pub fn locate(&self, x: f64, y: f64) -> (usize, bool) {
        let fx = ((x - self.x_min) / self.dx()).floor();
        let fy = ((y - self.y_min) / self.dy()).floor();
        let inside = fx >= 0.0 && fy >= 0.0 && fx < self.nx as f64 && fy < self.ny as f64;
        let ix = fx.clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = fy.clamp(0.0, (self.ny - 1) as f64) as usize;
        (iy * self.nx + ix, !inside)
    }

    /// Density integrated over each cell by midpoint quadrature on a
    /// `sub × sub` split; row-major with `x` fastest.
    pub fn integrate(&self, density: impl Fn(f64, f64) -> f64, sub: usize) -> Vec<f64> {
        let (dx, dy) = (self.dx() / sub as f64, self.dy() / sub as f64);
        let mut out = vec![0.0; self.cells()];
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let x0 = self.x_min + ix as f64 * self.dx();
                let y0 = self.y_min + iy as f64 * self.dy();
                let mut acc = 0.0;
                for sy in 0..sub {
                    for sx in 0..sub {
                        acc += density(x0 + (sx as f64 + 0.5) * dx, y0 + (sy as f64 + 0.5) * dy);
                    }
                }
                out[iy * self.nx + ix] = acc * dx * dy;
            }
        }
        out
    }
}

/// Pseudo-count added to every histogram cell.
pub const HIST_PSEUDO_COUNT: f64 = 0.5;
/// Sub-cell split used to integrate the reference density.
pub const HIST_QUADRATURE: usize = 4;
/// Fraction of out-of-box samples above which a warning is logged.
pub const HIST_OUTSIDE_WARN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistKl {
    pub value: f64,
    pub outside_fraction: f64,
}

/// `KL(ĥ ‖ r̂)` between the histogram of `samples` and the reference
/// density integrated per cell. Both sides get the same pseudo-count
/// treatment: `ĥ = (count + ½) / (N + ½C)`, `r̂ = (N r + ½) / (N + ½C)` where
/// `r` is the reference cell mass renormalised to the box. Samples outside
/// the box land in the nearest boundary cell.
pub fn hist_kl_2d(samples: &Tensor, density: impl Fn(f64, f64) -> f64, grid: &GridSpec) -> Result<HistKl> {
    grid.validate()?;
    if samples.shape().len() != 2 || samples.shape()[1] != 2 {
        return Err(Error::invalid(format!("expected [n, 2] samples, got {:?}", samples.shape())));
    }
    let n = samples.shape()[0];
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    if !samples.is_finite() {
        return Err(Error::NonFinite("histogram samples"));
    }
    let c = grid.cells();
    let mut counts = vec![0.0; c];
    let mut outside = 0usize;
    for i in 0..n {
        let row = samples.row(i);
        let (cell, clamped) = grid.locate(row[0], row[1]);
        counts[cell] += 1.0;
        outside += usize::from(clamped);
    }
    let outside_fraction = outside as f64 / n as f64;
    if outside_fraction > HIST_OUTSIDE_WARN {
        log::warn!(
            "{:.2}% of samples fall outside the histogram box and were clamped",
            100.0 * outside_fraction
        );
    }
    let mass = grid.integrate(density, HIST_QUADRATURE);
    let total: f64 = mass.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite("reference cell masses"));
    }
    let nf = n as f64;
    let denom = nf + HIST_PSEUDO_COUNT * c as f64;
    let value = counts
        .iter()
        .zip(&mass)
        .map(|(&k, &m)| {
            let h = (k + HIST_PSEUDO_COUNT) / denom;
            let r = (nf * m / total + HIST_PSEUDO_COUNT) / denom;
            h * (h / r).ln()
        })
        .sum::<f64>()
        .max(0.0);
    Ok(HistKl { value, outside_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddo::theorem3_target;
    use crate::models::ArConfig;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn dist(p: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn divergences_of_equal_distributions_vanish() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert_eq!(reverse_kl(&p, &p).unwrap(), 0.0);
        assert!(js(&p, &p).unwrap().abs() < 1e-16);
        assert_eq!(tv(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_example_and_js_bound() {
        let p = dist(&[0.7, 0.3]);
        let q = dist(&[0.5, 0.5]);
        let oracle = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert!((kl(&p, &q).unwrap() - oracle).abs() < 1e-15);
        let a = dist(&[1.0 - 1e-12, 1e-12]);
        let b = dist(&[1e-12, 1.0 - 1e-12]);
        let v = js(&a, &b).unwrap();
        assert!(v <= std::f64::consts::LN_2 && v > 0.69);
        assert!(matches!(kl(&q, &dist(&[1.0, 0.0])), Err(Error::SupportViolation { .. })));
    }

    #[test]
    fn theorem2_equal_case_passes() {
        let d = dist(&[0.1, 0.6, 0.3]);
        let r = dist(&[0.3, 0.3, 0.4]);
        let rep = verify_theorem2(&d, &r, &d).unwrap();
        assert!(rep.passed());
        assert!(rep.kl_forward == 0.0 && rep.loss_gap.abs() < 1e-15);
    }

    #[test]
    fn loss_gap_weights_the_mixture_term_twice() {
        // Closed form with p_data = p_ref = p: Σ p ln((p_θ + p)² / (4 p_θ p)).
        let u = dist(&[0.5, 0.5]);
        let theta = dist(&[0.2, 0.8]);
        let (gap, identity) = loss_gap(&u, &u, &theta).unwrap();
        assert!((gap - 0.12883287184296843).abs() < 1e-14);
        assert!((identity - gap).abs() < 1e-14);
        // KL(p‖p_θ) = 0.22314..., KL(p‖m_θ) = 0.04715...; one copy is not enough.
        assert!((0.22314355131420976 - 2.0 * 0.04715533973562064 - gap).abs() < 1e-14);
    }

    #[test]
    fn constants_depend_only_on_their_bounds() {
        let a = DivergenceBoundConstants::from_bounds(0.7, -0.2, 1.1);
        let b = DivergenceBoundConstants::from_bounds(0.7, -0.2, 3.0);
        let c = DivergenceBoundConstants::from_bounds(0.7, 0.5, 1.1);
        assert_eq!(a.c1, b.c1);
        assert_eq!(a.c2, c.c2);
        let m: f64 = 0.7;
        let m1: f64 = -0.2;
        let oracle = (2.0 * ((2.0 + (-m).exp() + m.exp()) / (1.0 + m1.exp())).max(1.0 + (-m1).exp())).sqrt();
        assert!((a.c1 - oracle).abs() < 1e-15);
    }

    #[test]
    fn guidance_examples() {
        let p = dist(&[0.6, 0.3, 0.1]);
        let q = dist(&[0.4, 0.4, 0.2]);
        let g0 = guide_compose(&p, &q, 0.0).unwrap();
        assert!(tv(&g0, &p).unwrap() < 1e-15);
        assert!(tv(&guide_compose(&p, &p, 3.0).unwrap(), &p).unwrap() < 1e-15);
        for w in [0.5, 1.0, 3.0] {
            let a = guide_compose(&p, &q, w).unwrap();
            let b = theorem3_target(&q, &p, 1.0 / (1.0 + w)).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfg_score_examples() {
        let c = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let u = Tensor::matrix(1, 2, vec![0.5, 0.0]).unwrap();
        assert_eq!(cfg_score(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_score(&c, &c, 7.0).unwrap(), c);
        assert_eq!(cfg_score(&c, &u, 1.0).unwrap().data(), &[1.5, -4.0]);
        assert!(cfg_score(&c, &Tensor::vector(vec![0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn ar_guidance_sharpens() {
        let cfg = ArConfig {
            vocab_size: 3,
            seq_len: 1,
            num_classes: 2,
            hidden: 4,
        };
        let model = ArModel::init(cfg, &mut seeded(4)).unwrap();
        let mut last = f64::INFINITY;
        for w in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let h = entropy(&ar_cfg_distribution(&model, 0, w).unwrap());
            assert!(h <= last + 1e-12);
            last = h;
        }
        let mut rng = seeded(1);
        let x = ar_cfg_sample(&model, 1, 2.0, &mut rng).unwrap();
        assert_eq!(x.len(), 1);
    }

    fn normal_samples(n: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let data: Vec<f64> = (0..2 * n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        Tensor::matrix(n, 2, data).unwrap()
    }

    fn std_normal(x: f64, y: f64) -> f64 {
        (-(x * x + y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI)
    }

    #[test]
    fn histogram_self_consistency() {
        let s = normal_samples(100_000, 1);
        let grid = GridSpec::around(&s).unwrap();
        let v = hist_kl_2d(&s, std_normal, &grid).unwrap();
        assert!(v.value < 0.05, "{v:?}");
        assert!(v.outside_fraction < 0.01);
    }

    #[test]
    fn histogram_single_cell_against_uniform() {
        let grid = GridSpec {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            nx: 64,
            ny: 64,
        };
        let s = Tensor::matrix(100_000, 2, vec![0.5; 200_000]).unwrap();
        let v = hist_kl_2d(&s, |_, _| 1.0, &grid).unwrap().value;
        let ln_cells = (4096f64).ln();
        assert!((v - ln_cells).abs() < 0.05 * ln_cells, "{v} vs {ln_cells}");
    }

    #[test]
    fn histogram_spread_shrinks_with_more_samples() {
        let grid = GridSpec {
            x_min: -4.0,
            x_max: 4.0,
            y_min: -4.0,
            y_max: 4.0,
            nx: 64,
            ny: 64,
        };
        let spread = |n: usize| {
            let v: Vec<f64> = (0..8)
                .map(|k| hist_kl_2d(&normal_samples(n, 100 + k), std_normal, &grid).unwrap().value)
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        assert!(spread(40_000) < spread(10_000));
    }

    #[test]
    fn out_of_box_points_are_clamped() {
        let grid = GridSpec {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            nx: 2,
            ny: 2,
        };
        assert_eq!(grid.locate(-5.0, 0.2), (0, true));
        assert_eq!(grid.locate(0.7, 9.0), (3, true));
        assert_eq!(grid.locate(0.7, 0.2), (1, false));
    }
}

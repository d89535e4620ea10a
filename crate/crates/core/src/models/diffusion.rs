use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::check_label;
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::nn::{Activation, Mlp};

/// Frequencies of the sinusoidal features of `c_noise` fed to `F`.
pub const TIME_FREQUENCIES: [f64; 3] = [1.0, 2.0, 4.0];

/// Variance-exploding schedule (`alpha_t = 1`, `sigma_t = t`) with the EDM
/// preconditioning and a log-normal training time distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::for_data_std(0.5)
    }
}

impl NoiseSchedule {
    /// Conventional sampler bounds (0.002, 80) rescaled from a data std of 0.5.
    pub fn for_data_std(sigma_data: f64) -> Self {
        let s = sigma_data / 0.5;
        Self {
            sigma_data,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002 * s,
            sigma_max: 80.0 * s,
            rho: 7.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_data > 0.0
            && self.p_std > 0.0
            && self.sigma_min > 0.0
            && self.sigma_max > self.sigma_min
            && self.rho > 0.0
            && self.p_mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sd2 + t * t)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.sigma_data * t / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    pub fn c_noise(&self, t: f64) -> f64 {
        0.25 * t.ln()
    }

    /// Denoiser-MSE weight `(t² + σ_d²) / (t σ_d)²`, equal to `1 / c_out²`.
    pub fn loss_weight(&self, t: f64) -> f64 {
        (t * t + self.sigma_data * self.sigma_data) / (t * self.sigma_data).powi(2)
    }

    /// Draws `t` with `ln t ~ N(p_mean, p_std²)`.
    pub fn sample_time(&self, rng: &mut impl Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.p_mean + self.p_std * z).exp()
    }
}

/// Karras sigma grid of `steps` levels from `sigma_max` down to `sigma_min`,
/// followed by a final 0.
pub fn sigma_grid(schedule: &NoiseSchedule, steps: usize) -> Vec<f64> {
    let inv = 1.0 / schedule.rho;
    let (hi, lo) = (schedule.sigma_max.powf(inv), schedule.sigma_min.powf(inv));
    let mut grid: Vec<f64> = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            (hi + frac * (lo - hi)).powf(schedule.rho)
        })
        .collect();
    grid.push(0.0);
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub num_classes: usize,
    pub activation: Activation,
    pub schedule: NoiseSchedule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![64, 64, 64],
            num_classes: 0,
            activation: Activation::Silu,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl DiffusionConfig {
    fn input_dim(&self) -> usize {
        self.data_dim + 1 + 2 * TIME_FREQUENCIES.len()
    }

    fn mlp(&self) -> Mlp {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.data_dim);
        Mlp::new(widths, self.activation)
    }
}

/// One `(t, ε)` draw per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(schedule: &NoiseSchedule, n: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let t = (0..n).map(|_| schedule.sample_time(rng)).collect();
        let eps = (0..n * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        Self {
            t,
            eps: Tensor::matrix(n, dim, eps).expect("shape"),
        }
    }

    /// `x_t = x_0 + t ε`.
    pub fn noisy(&self, x0: &Tensor) -> Result<Tensor> {
        if x0.shape() != self.eps.shape() {
            return Err(Error::Grad(crate::grad::GradError::ShapeMismatch {
                op: "noisy",
                left: x0.shape().to_vec(),
                right: self.eps.shape().to_vec(),
            }));
        }
        let dim = x0.shape()[1];
        let data = x0
            .data()
            .iter()
            .zip(self.eps.data())
            .enumerate()
            .map(|(k, (x, e))| x + self.t[k / dim] * e)
            .collect();
        Ok(Tensor::matrix(self.t.len(), dim, data)?)
    }
}

/// EDM-preconditioned denoiser around a free-form MLP `F`:
/// `D(x_t, t) = c_skip(t) x_t + c_out(t) F(c_in(t) x_t, c_noise(t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    config: DiffusionConfig,
    mlp: Mlp,
    params: Vec<Tensor>,
}

impl DiffusionModel {
    pub fn param_shapes(config: &DiffusionConfig) -> Vec<Vec<usize>> {
        let mut shapes = config.mlp().param_shapes();
        shapes.push(vec![config.num_classes + 1, config.hidden[0]]);
        shapes
    }

    fn validate(config: &DiffusionConfig) -> Result<()> {
        if config.data_dim == 0 || config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::invalid("diffusion model needs positive widths"));
        }
        config.schedule.validate()
    }

    pub fn init(config: DiffusionConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::validate(&config)?;
        let mlp = config.mlp();
        let mut params = mlp.init(rng, 1.0);
        params.push(Tensor::zeros(&[config.num_classes + 1, config.hidden[0]]));
        Ok(Self {
            config,
            mlp,
            params,
        })
    }

    pub fn from_params(config: DiffusionConfig, params: Vec<Tensor>) -> Result<Self> {
        Self::validate(&config)?;
        let shapes = Self::param_shapes(&config);
        if params.len() != shapes.len()
            || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::Checkpoint(
                "parameter shapes do not match diffusion config".into(),
            ));
        }
        Ok(Self {
            mlp: config.mlp(),
            config,
            params,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.config.schedule
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Sets the last layer of `F` to zero, so `D(x_t, t) = c_skip(t) x_t`.
    pub fn zero_output(&mut self) {
        let n = self.mlp.n_params();
        for p in &mut self.params[n - 2..n] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_inputs(&self, x_t: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<()> {
        let shape = x_t.shape();
        if shape.len() != 2 || shape[1] != self.config.data_dim {
            return Err(Error::invalid(format!(
                "expected [n, {}] inputs, got {shape:?}",
                self.config.data_dim
            )));
        }
        if t.len() != shape[0] || labels.len() != shape[0] {
            return Err(Error::invalid("times/labels must have one entry per row"));
        }
        if let Some(bad) = t.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("diffusion time must be > 0, got {bad}")));
        }
        for &l in labels {
            check_label(l, self.config.num_classes)?;
        }
        Ok(())
    }

    /// Network input `[c_in x_t, c_noise, sin(f c_noise), cos(f c_noise)]`.
    fn features(&self, x_t: &Tensor, t: &[f64]) -> Tensor {
        let s = &self.config.schedule;
        let width = self.config.input_dim();
        let mut out = Vec::with_capacity(t.len() * width);
        for (i, &ti) in t.iter().enumerate() {
            let cin = s.c_in(ti);
            out.extend(x_t.row(i).iter().map(|x| cin * x));
            let cn = s.c_noise(ti);
            out.push(cn);
            for f in TIME_FREQUENCIES {
                out.push((f * cn).sin());
            }
            for f in TIME_FREQUENCIES {
                out.push((f * cn).cos());
            }
        }
        Tensor::matrix(t.len(), width, out).expect("shape")
    }

    fn label_indices(&self, labels: &[Option<usize>]) -> Vec<usize> {
        labels
            .iter()
            .map(|l| l.unwrap_or(self.config.num_classes))
            .collect()
    }

    fn label_embedding_eval(&self, labels: &[Option<usize>]) -> Tensor {
        let table = self.params.last().expect("label table");
        let h = self.config.hidden[0];
        let mut out = Vec::with_capacity(labels.len() * h);
        for r in self.label_indices(labels) {
            out.extend_from_slice(&table.data()[r * h..(r + 1) * h]);
        }
        Tensor::matrix(labels.len(), h, out).expect("shape")
    }

    /// `F_θ(c_in x_t, c_noise)` without recording.
    pub fn f_eval(&self, x_t: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor> {
        self.check_inputs(x_t, t, labels)?;
        let input = self.features(x_t, t);
        let emb = self.label_embedding_eval(labels);
        let n = self.mlp.n_params();
        Ok(self.mlp.forward_eval(&self.params[..n], &input, Some(&emb))?)
    }

    /// `F_θ` on the tape; `params` are this model's recorded parameters.
    pub fn f_taped(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x_t: &Tensor,
        t: &[f64],
        labels: &[Option<usize>],
    ) -> Result<Var> {
        self.check_inputs(x_t, t, labels)?;
        let input = tape.leaf(self.features(x_t, t))?;
        let n = self.mlp.n_params();
        let h = self.config.hidden[0];
        let flat: Vec<usize> = self
            .label_indices(labels)
            .into_iter()
            .flat_map(|r| r * h..(r + 1) * h)
            .collect();
        let emb = tape.take(params[n], &flat)?;
        let emb = tape.reshape(emb, &[labels.len(), h])?;
        Ok(self.mlp.forward(tape, &params[..n], input, Some(emb))?)
    }

    /// Preconditioned denoiser output, an estimate of `x_0`.
    pub fn denoise(&self, x_t: &Tensor, t: &[f64], labels: &[Option<usize>]) -> Result<Tensor> {
        let f = self.f_eval(x_t, t, labels)?;
        let s = &self.config.schedule;
        let dim = self.config.data_dim;
        let data = x_t
            .data()
            .iter()
            .zip(f.data())
            .enumerate()
            .map(|(k, (x, fv))| {
                let ti = t[k / dim];
                s.c_skip(ti) * x + s.c_out(ti) * fv
            })
            .collect();
        Ok(Tensor::matrix(t.len(), dim, data)?)
    }

    /// Regression target `F̂ = (x_0 - c_skip x_t) / c_out`.
    pub fn f_target(&self, x0: &Tensor, x_t: &Tensor, t: &[f64]) -> Tensor {
        let s = &self.config.schedule;
        let dim = self.config.data_dim;
        let data = x0
            .data()
            .iter()
            .zip(x_t.data())
            .enumerate()
            .map(|(k, (a, b))| {
                let ti = t[k / dim];
                (a - s.c_skip(ti) * b) / s.c_out(ti)
            })
            .collect();
        Tensor::matrix(t.len(), dim, data).expect("shape")
    }

    /// Row-wise `‖F_θ - F̂‖²` on the tape, shape `[n]`.
    pub fn f_error_taped(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x0: &Tensor,
        draw: &NoiseDraw,
        labels: &[Option<usize>],
    ) -> Result<Var> {
        let x_t = draw.noisy(x0)?;
        let f = self.f_taped(tape, params, &x_t, &draw.t, labels)?;
        let target = tape.leaf(self.f_target(x0, &x_t, &draw.t))?;
        Ok(tape.squared_error_rows(f, target)?)
    }

    /// Row-wise `‖F_θ - F̂‖²` without recording.
    pub fn f_error(&self, x0: &Tensor, draw: &NoiseDraw, labels: &[Option<usize>]) -> Result<Vec<f64>> {
        let x_t = draw.noisy(x0)?;
        let f = self.f_eval(&x_t, &draw.t, labels)?;
        let target = self.f_target(x0, &x_t, &draw.t);
        Ok((0..draw.t.len())
            .map(|i| {
                f.row(i)
                    .iter()
                    .zip(target.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect())
    }

    /// F-prediction MSE for a given noise draw: mean over rows of `‖F_θ - F̂‖²`.
    pub fn edm_loss_taped(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x0: &Tensor,
        labels: &[Option<usize>],
        draw: &NoiseDraw,
    ) -> Result<Var> {
        if x0.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let err = self.f_error_taped(tape, params, x0, draw, labels)?;
        Ok(tape.mean(err)?)
    }

    /// Monte-Carlo F-prediction loss with a fresh `(t, ε)` per row.
    pub fn edm_mle_loss(
        &self,
        x0: &Tensor,
        labels: &[Option<usize>],
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let n = x0.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let draw = NoiseDraw::sample(&self.config.schedule, n, self.config.data_dim, rng);
        let loss = self.f_error(x0, &draw, labels)?.iter().sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("edm loss"));
        }
        Ok(loss)
    }

    /// The same loss written as a weighted denoiser MSE,
    /// mean of `(t²+σ_d²)/(t σ_d)² ‖D_θ(x_t, t) - x_0‖²`.
    pub fn weighted_denoiser_loss(
        &self,
        x0: &Tensor,
        labels: &[Option<usize>],
        draw: &NoiseDraw,
    ) -> Result<f64> {
        let x_t = draw.noisy(x0)?;
        let d = self.denoise(&x_t, &draw.t, labels)?;
        let n = draw.t.len();
        let total: f64 = (0..n)
            .map(|i| {
                let w = self.config.schedule.loss_weight(draw.t[i]);
                w * d
                    .row(i)
                    .iter()
                    .zip(x0.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        Ok(total / n as f64)
    }

    /// Draws `x_{t_max} ~ N(0, t_max² I)` for each label.
    pub fn initial_noise(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let smax = self.config.schedule.sigma_max;
        let data = (0..n * self.config.data_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                smax * z
            })
            .collect();
        Tensor::matrix(n, self.config.data_dim, data).expect("shape")
    }

    /// Deterministic probability-flow sampler (Heun) from `x_{t_max}` noise.
    pub fn sample(&self, labels: &[Option<usize>], steps: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.sample_guided(labels, 0.0, steps, rng)
    }

    /// Sampler with classifier-free guidance on the denoiser:
    /// `D_c + w (D_c - D_u)`. `w = 0` is plain sampling.
    pub fn sample_guided(
        &self,
        labels: &[Option<usize>],
        w: f64,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if steps < 2 {
            return Err(Error::invalid("sampler needs at least 2 steps"));
        }
        let x = self.initial_noise(labels.len(), rng);
        if labels.is_empty() {
            return Ok(x);
        }
        let grid = sigma_grid(&self.config.schedule, steps);
        let uncond = vec![None; labels.len()];
        heun_sample(x, &grid, |x, t| {
            let ts = vec![t; labels.len()];
            let cond = self.denoise(x, &ts, labels)?;
            if w == 0.0 {
                return Ok(cond);
            }
            let unc = self.denoise(x, &ts, &uncond)?;
            crate::metrics::cfg_score(&cond, &unc, w)
        })
    }
}

/// Integrates `dx/dt = (x - D(x, t)) / t` along `grid` (decreasing, ending at 0)
/// with Heun's method; the final step into `t = 0` is an Euler step.
pub fn heun_sample(
    mut x: Tensor,
    grid: &[f64],
    denoise: impl Fn(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let d0 = denoise(&x, t0)?;
        let slope0: Vec<f64> = x
            .data()
            .iter()
            .zip(d0.data())
            .map(|(xi, di)| (xi - di) / t0)
            .collect();
        let mut x1 = x.clone();
        x1.data_mut()
            .iter_mut()
            .zip(&slope0)
            .for_each(|(v, s)| *v += (t1 - t0) * s);
        if t1 > 0.0 {
            let d1 = denoise(&x1, t1)?;
            let xd = x.data().to_vec();
            for (k, v) in x1.data_mut().iter_mut().enumerate() {
                let slope1 = (*v - d1.data()[k]) / t1;
                *v = xd[k] + (t1 - t0) * 0.5 * (slope0[k] + slope1);
            }
        }
        if !x1.is_finite() {
            return Err(Error::NonFinite("probability-flow sampler"));
        }
        x = x1;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_model(seed: u64) -> DiffusionModel {
        let config = DiffusionConfig {
            hidden: vec![16, 16],
            ..DiffusionConfig::default()
        };
        DiffusionModel::init(config, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn c_skip_is_half_at_data_std() {
        let s = NoiseSchedule::for_data_std(0.7);
        assert!((s.c_skip(0.7) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn preconditioning_identities() {
        let s = NoiseSchedule::for_data_std(0.5);
        for t in [1e-3, 0.02, 0.5, 1.0, 7.0, 80.0] {
            let cin = s.c_in(t);
            assert!((cin * cin * (0.25 + t * t) - 1.0).abs() < 1e-12);
            let cout = s.c_out(t);
            assert!((cout * cout - t * t * 0.25 * cin * cin).abs() < 1e-12 * (1.0 + cout * cout));
            assert!((s.loss_weight(t) * cout * cout - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_denoiser_is_pure_skip() {
        let mut m = toy_model(1);
        m.zero_output();
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let t = [0.3, 4.0];
        let d = m.denoise(&x, &t, &[None, None]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = m.schedule().c_skip(t[i]) * x.row(i)[j];
                assert!((d.row(i)[j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nonpositive_time_rejected() {
        let m = toy_model(2);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(m.denoise(&x, &[0.0], &[None]).is_err());
        assert!(m.denoise(&x, &[-1.0], &[None]).is_err());
    }

    #[test]
    fn f_form_equals_weighted_denoiser_form() {
        let m = toy_model(3);
        let mut rng = seeded(4);
        let x0 = Tensor::matrix(8, 2, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let labels = vec![None; 8];
        let draw = NoiseDraw::sample(m.schedule(), 8, 2, &mut rng);
        let f_form = m.f_error(&x0, &draw, &labels).unwrap().iter().sum::<f64>() / 8.0;
        let d_form = m.weighted_denoiser_loss(&x0, &labels, &draw).unwrap();
        assert!((f_form - d_form).abs() < 1e-10 * f_form.max(1.0), "{f_form} vs {d_form}");
    }

    #[test]
    fn zero_network_loss_is_target_energy() {
        let mut m = toy_model(5);
        m.zero_output();
        let x0 = Tensor::matrix(4, 2, vec![0.3, 0.1, -0.4, 0.2, 1.0, -1.0, 0.0, 0.5]).unwrap();
        let draw = NoiseDraw::sample(m.schedule(), 4, 2, &mut seeded(6));
        let x_t = draw.noisy(&x0).unwrap();
        let target = m.f_target(&x0, &x_t, &draw.t);
        let energy = target.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        let loss = m.f_error(&x0, &draw, &[None; 4]).unwrap().iter().sum::<f64>() / 4.0;
        assert!((loss - energy).abs() < 1e-12 && loss > 0.0);
    }

    #[test]
    fn perfect_network_on_point_mass_has_zero_loss() {
        // For x_0 = 0, F̂ = -c_skip x_t / c_out; a network reproducing that gives zero loss.
        let m = toy_model(7);
        let draw = NoiseDraw::sample(m.schedule(), 5, 2, &mut seeded(8));
        let x0 = Tensor::zeros(&[5, 2]);
        let x_t = draw.noisy(&x0).unwrap();
        let target = m.f_target(&x0, &x_t, &draw.t);
        let s = m.schedule();
        for i in 0..5 {
            for j in 0..2 {
                let f = -s.c_skip(draw.t[i]) * x_t.row(i)[j] / s.c_out(draw.t[i]);
                assert!((f - target.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taped_error_matches_plain() {
        let m = toy_model(9);
        let x0 = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, -0.4, 0.9, 0.0]).unwrap();
        let draw = NoiseDraw::sample(m.schedule(), 3, 2, &mut seeded(10));
        let mut tape = Tape::new();
        let pv = crate::models::record_params(&mut tape, m.params()).unwrap();
        let e = m.f_error_taped(&mut tape, &pv, &x0, &draw, &[None; 3]).unwrap();
        let plain = m.f_error(&x0, &draw, &[None; 3]).unwrap();
        for (a, b) in tape.value(e).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_normal_time_sampler_moments() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(11);
        let n = 1_000_000;
        let logs: Vec<f64> = (0..n).map(|_| s.sample_time(&mut rng).ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - s.p_mean).abs() < 0.01 * s.p_mean.abs());
        assert!((var.sqrt() - s.p_std).abs() < 0.01 * s.p_std);
    }

    #[test]
    fn sigma_grid_endpoints() {
        let s = NoiseSchedule::default();
        let g = sigma_grid(&s, 18);
        assert_eq!(g.len(), 19);
        assert!((g[0] - 80.0).abs() < 1e-9 && (g[17] - 0.002).abs() < 1e-12 && g[18] == 0.0);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn zero_denoiser_contracts_to_origin() {
        let s = NoiseSchedule::default();
        let grid = sigma_grid(&s, 18);
        let x0 = Tensor::matrix(1, 2, vec![40.0, -25.0]).unwrap();
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = heun_sample(x0.clone(), &grid, |x, _| Ok(Tensor::zeros(x.shape()))).unwrap();
        assert!(norm(&out) < norm(&x0));
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let m = toy_model(12);
        let a = m.sample(&[None; 16], 18, &mut seeded(13)).unwrap();
        let b = m.sample(&[None; 16], 18, &mut seeded(13)).unwrap();
        assert_eq!(a, b);
        assert!(m.sample(&[None; 2], 1, &mut seeded(13)).is_err());
    }
}

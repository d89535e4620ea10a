//! Dense layers, parameter initialisation and an Adam optimiser.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grad::{self, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * grad::sigmoid(x),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> grad::Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Silu => tape.silu(x),
        }
    }
}

/// Multi-layer perceptron. Parameters are laid out as `[w0, b0, w1, b1, ...]`
/// with `w_i` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        Self { widths, activation }
    }

    pub fn n_params(&self) -> usize {
        2 * (self.widths.len() - 1)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    /// LeCun-normal weights, zero biases. The last layer is scaled by
    /// `last_scale` (zero gives an all-zero output).
    pub fn init(&self, rng: &mut impl Rng, last_scale: f64) -> Vec<Tensor> {
        let n_layers = self.widths.len() - 1;
        let mut out = Vec::with_capacity(self.n_params());
        for (l, w) in self.widths.windows(2).enumerate() {
            let std = (1.0 / w[0] as f64).sqrt() * if l + 1 == n_layers { last_scale } else { 1.0 };
            let data = (0..w[0] * w[1])
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect::<Vec<f64>>();
            out.push(Tensor::matrix(w[0], w[1], data).expect("shape"));
            out.push(Tensor::zeros(&[w[1]]));
        }
        out
    }

    /// Forward pass on the tape. `first_bias` (shape `[n, h0]`) is added to the
    /// first hidden pre-activation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        first_bias: Option<Var>,
    ) -> grad::Result<Var> {
        let n_layers = self.widths.len() - 1;
        let mut h = input;
        for l in 0..n_layers {
            h = tape.affine(h, params[2 * l], params[2 * l + 1])?;
            if l == 0 {
                if let Some(extra) = first_bias {
                    h = tape.add(h, extra)?;
                }
            }
            if l + 1 < n_layers {
                h = self.activation.record(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Same computation as [`Mlp::forward`] without recording.
    pub fn forward_eval(
        &self,
        params: &[Tensor],
        input: &Tensor,
        first_bias: Option<&Tensor>,
    ) -> grad::Result<Tensor> {
        let n_layers = self.widths.len() - 1;
        let mut h = input.clone();
        for l in 0..n_layers {
            let mut z = h.matmul(&params[2 * l])?;
            let bias = params[2 * l + 1].data();
            let cols = bias.len();
            let extra = if l == 0 { first_bias } else { None };
            if let Some(e) = extra {
                if e.shape() != z.shape() {
                    return Err(grad::GradError::ShapeMismatch {
                        op: "mlp_first_bias",
                        left: z.shape().to_vec(),
                        right: e.shape().to_vec(),
                    });
                }
            }
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v += bias[k % cols];
                if let Some(e) = extra {
                    *v += e.data()[k];
                }
            }
            if l + 1 < n_layers {
                let act = self.activation;
                z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        if !h.is_finite() {
            return Err(grad::GradError::NonFinite { op: "mlp_forward" });
        }
        Ok(h)
    }
}

/// Adam with bias correction. State is sized on first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over the first `warmup` steps (1-based `step`).
pub fn warmup_lr(peak: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}

pub fn grads_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

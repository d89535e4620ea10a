use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Exponential moving average of parameters with a half-life measured in
/// training examples.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    shadow: Vec<Tensor>,
    half_life: f64,
}

impl EmaState {
    pub fn new(params: &[Tensor], half_life: f64) -> Result<Self> {
        if !(half_life > 0.0 && half_life.is_finite()) {
            return Err(Error::invalid(format!("EMA half-life must be positive, got {half_life}")));
        }
        Ok(Self {
            shadow: params.to_vec(),
            half_life,
        })
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn half_life(&self) -> f64 {
        self.half_life
    }

    /// `2^(-examples / half_life)`.
    pub fn decay(&self, examples: f64) -> f64 {
        (-examples / self.half_life).exp2()
    }

    /// `shadow ← decay·shadow + (1-decay)·params`, written as an increment so
    /// a shadow equal to `params` stays bit-identical.
    pub fn update(&mut self, params: &[Tensor], examples: f64) {
        let w = 1.0 - self.decay(examples);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv += w * (pv - *sv);
            }
        }
    }
}

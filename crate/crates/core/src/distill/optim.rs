//! Adam and the validation-driven learning-rate halving rule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Current learning rate (starts at `config.lr`, halved by [`LrHalving`]).
    pub lr: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, lr: config.lr, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated on `params` and
    /// replaces each with a fresh gradient-tracking leaf. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step<S: Scalar>(&mut self, params: Vec<&mut Tensor<S>>) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (p, (m, v)) in params.into_iter().zip(&mut self.moments) {
            let grad = p.grad();
            let mut data = p.to_f64_vec();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64_lossy());
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            *p = Tensor::from_f64(&data, p.shape())?.tracked();
        }
        Ok(())
    }
}

/// Halves the learning rate once the validation loss has risen on two
/// consecutive evaluations; the count restarts after each halving.
#[derive(Debug, Clone, Default)]
pub struct LrHalving {
    last: Option<f64>,
    rises: usize,
}

impl LrHalving {
    /// Records one validation loss; returns true when the rate should halve.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        let rose = self.last.is_some_and(|prev| val_loss > prev);
        self.last = Some(val_loss);
        self.rises = if rose { self.rises + 1 } else { 0 };
        if self.rises >= 2 {
            self.rises = 0;
            true
        } else {
            false
        }
    }
}

//! Adam and a step-decay learning-rate schedule.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::Parameterized;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub base: f64,
    pub gamma: f64,
    /// Decay period in epochs.
    pub step_every: usize,
}

impl StepLr {
    /// `gamma` every `fraction * epochs` epochs (at least one).
    pub fn for_run(base: f64, gamma: f64, fraction: f64, epochs: usize) -> Self {
        let step_every = ((fraction * epochs as f64).round() as usize).max(1);
        Self { base, gamma, step_every }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base > 0.0 && self.base.is_finite(), Config, "learning rate must be positive, got {}", self.base);
        ensure!(self.gamma > 0.0 && self.gamma <= 1.0, Config, "step gamma must be in (0, 1], got {}", self.gamma);
        ensure!(self.step_every >= 1, Config, "step_every must be >= 1");
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let k = (epoch / self.step_every) as i32;
        self.base * self.gamma.powi(k)
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `model` from the matching gradient holder `grads`.
    /// Refuses non-finite gradients without touching the model.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, grads: &M, lr: f64) -> Result<()> {
        let g = grads.collect_params();
        if let Some((name, _)) = g.iter().find(|(_, a)| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged(format!("non-finite gradient in {name}")));
        }
        if self.m.is_empty() {
            self.m = g.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
            self.v = self.m.clone();
        }
        ensure!(self.m.len() == g.len(), Shape, "optimizer state has {} tensors, gradients {}", self.m.len(), g.len());
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let rate = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        let mut k = 0;
        let mut mismatch = None;
        model.visit_mut("", &mut |name, mut p| {
            let (m, v, gk) = (&mut self.m[k], &mut self.v[k], &g[k].1);
            k += 1;
            if p.shape() != gk.shape() {
                mismatch.get_or_insert(name);
                return;
            }
            Zip::from(&mut p).and(m).and(v).and(gk).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= rate * *m / (v.sqrt() + eps);
            });
        });
        ensure!(mismatch.is_none(), Shape, "gradient shape mismatch at {}", mismatch.unwrap_or_default());
        Ok(())
    }
}

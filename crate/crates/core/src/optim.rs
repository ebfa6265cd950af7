//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameter slots.
#[derive(Debug, Clone)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<R>>,
    second: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: param_lens.iter().map(|&n| vec![R::zero(); n]).collect(),
            second: param_lens.iter().map(|&n| vec![R::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every slot; `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<R>], grads: &[Tensor<R>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam has {} slots, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first[i].len() {
                return Err(Error::shape("adam_step", format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = R::from_f64_lossy(c.beta1);
        let b2 = R::from_f64_lossy(c.beta2);
        let lr = R::from_f64_lossy(c.lr);
        let eps = R::from_f64_lossy(c.eps);
        let corr1 = R::one() - b1.powi(t);
        let corr2 = R::one() - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            for (((w, m), v), &gv) in data.iter_mut().zip(self.first[i].iter_mut()).zip(self.second[i].iter_mut()).zip(g.data()) {
                *m = b1 * *m + (R::one() - b1) * gv;
                *v = b2 * *v + (R::one() - b2) * gv * gv;
                let mhat = *m / corr1;
                let vhat = *v / corr2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

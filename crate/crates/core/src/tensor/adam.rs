use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one state slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Rebuilds an optimizer from checkpointed moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. A frozen store or a non-finite gradient rejects the step
    /// and leaves both parameters and optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::Frozen(params.owner().to_string()));
        }
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.shape() != m.shape()) {
            return Err(Error::Invalid(format!(
                "adam: {} gradients do not match {} parameter slots",
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!(
                "{}: non-finite gradient in tensor {} ({}); step {} rejected",
                params.owner(),
                i,
                params.names()[i],
                self.step + 1
            );
            return Err(Error::NonFiniteGradient);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one, lr_t, eps_t) = (T::one(), T::of(lr), T::of(eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let tensors = params.tensors_mut()?;
        for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr_t * mhat / (vhat.sqrt() + eps_t);
            }
        }
        self.step = t;
        Ok(())
    }
}

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.tensor.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> &[T] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[T] {
        &self.v[idx]
    }

    /// One update of every non-frozen parameter from its stored gradient,
    /// using learning rate `lr`. Fails without touching anything if a
    /// gradient is missing or non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(contract("learning rate must be non-negative"));
        }
        if store.len() != self.m.len() {
            return Err(contract("optimizer state does not match parameter store"));
        }
        for (_, p) in store.iter().filter(|(_, p)| !p.frozen) {
            let g = p
                .tensor
                .grad()
                .ok_or_else(|| contract(alloc::format!("missing gradient for {}", p.name)))?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(alloc::format!(
                    "non-finite gradient in {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(c.beta2, f64::from(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let lr_t = T::from_f64(lr);
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let eps = T::from_f64(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let tensor = store.get_mut(id);
            let g = tensor.grad().expect("checked above").to_vec();
            for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x = *x * decay;
                *x = *x - lr_t * mhat / (vhat.det_sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `start_lr` to `base_lr` over `warmup_steps`, constant
/// afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSchedule {
    pub start_lr: f64,
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        Self {
            start_lr: 1e-7,
            base_lr: 1e-5,
            warmup_steps: 1000,
        }
    }
}

impl WarmupSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.base_lr
        } else {
            self.start_lr
                + (self.base_lr - self.start_lr) * step as f64 / self.warmup_steps as f64
        }
    }
}

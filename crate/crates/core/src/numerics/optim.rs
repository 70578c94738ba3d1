use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Settings used for the style generator (`β1 = 0`, `β2 = 0.99`).
    pub fn generator() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Bias-corrected Adam over a [`ParamStore`]. Moments are created on first
/// update and each parameter counts its own steps, so parameters that are
/// only occasionally touched (per-instance latents) get correct bias
/// correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            states: vec![None; num_params],
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState<T>> {
        self.states.get(id.0).and_then(|s| s.as_ref())
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient. Fails without touching anything if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {}",
                    store.name(id)
                )));
            }
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape("adam", store.get(id).shape(), g.shape()));
            }
        }
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads.iter() {
            let shape = g.shape().to_vec();
            let st = self.states[id.0].get_or_insert_with(|| AdamState {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let step_size = T::lit(lr / bc1);
            let (b1, b2) = (T::lit(beta1), T::lit(beta2));
            let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
            let inv_bc2 = T::lit(1.0 / bc2);
            let e = T::lit(eps);
            let p = store.get_mut(id).data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + e;
                if denom > T::zero() {
                    *p -= step_size * *m / denom;
                }
            }
        }
        Ok(())
    }
}

/// Linear warm-up followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64, min_lr: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        if !(base_lr > 0.0) || min_lr < 0.0 || min_lr > base_lr {
            return Err(Error::invalid(format!(
                "learning rates must satisfy 0 <= min_lr <= base_lr, base_lr > 0 (got {min_lr}, {base_lr})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
            min_lr,
        })
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_steps: 0,
            total_steps: 0,
            min_lr: lr,
        }
    }

    /// Learning rate at `step`; out-of-range steps are clamped to `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = if step > self.total_steps {
            log::warn!(
                "lr_at: step {step} beyond total_steps {}, clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            step
        };
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

//! Adam with bias correction and an optional cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |id: ParamId| vec![T::zero(); store.get(id).len()];
        Self {
            config,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            step: 0,
        }
    }

    /// One update using the gradients stored on the parameters. A parameter
    /// without a gradient is treated as having a zero gradient. Any
    /// non-finite gradient aborts the step before a single value changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let p = store.get(id);
            if let Some(g) = &p.grad {
                if g.len() != p.len() {
                    return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient in parameter {}",
                        store.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, wd) = (T::one(), T::of(c.weight_decay));
        for id in store.ids() {
            let p = store.get_mut(id);
            let grad = p.grad.take();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let mut g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                if c.weight_decay != 0.0 {
                    g += wd * data[i];
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i].as_f64() / bc1;
                let vhat = v[i].as_f64() / bc2;
                data[i] -= T::of(lr * mhat / (vhat.sqrt() + c.eps));
            }
            p.grad = grad;
        }
        Ok(())
    }
}

/// Cosine annealing from `base` to `floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / (total as f64);
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

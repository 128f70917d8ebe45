use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are kept per store entry.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |i| Tensor::zeros(store.value(i).shape());
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    /// One update with the store's current gradients, which are consumed.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::usage("optimizer built for a different store"));
        }
        if let Some(id) = (0..store.len()).find(|&i| store.grad(i).is_none()) {
            return Err(Error::usage(format!(
                "adam step without gradient for {}",
                store.name(id)
            )));
        }
        let t = (store.step() + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        let grads = store.take_gradients();
        for (i, g) in grads.into_iter().enumerate() {
            let g = g.expect("checked above");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let denom = v[j].sqrt() * inv_bc2_sqrt + eps;
                p[j] = p[j] - step_size * m[j] / denom;
            }
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("adam update of {}", store.name(i))));
            }
        }
        store.bump_step();
        Ok(())
    }

    /// Moments as named tensors, for resumable checkpoints.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("adam.m/{}", store.name(i)), m.clone()));
            out.push((format!("adam.v/{}", store.name(i)), v.clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        store: &ParamStore<T>,
        entries: &[(String, Tensor<T>)],
    ) -> Result<()> {
        for i in 0..store.len() {
            let name = store.name(i);
            for (prefix, slot) in [("adam.m/", &mut self.m[i]), ("adam.v/", &mut self.v[i])] {
                let key = format!("{prefix}{name}");
                let t = entries
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::config(format!("missing optimizer state {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::dim(format!("optimizer state {key} has wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut super::Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads
        .grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// Linear warm-up followed by cosine annealing to zero, indexed by epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr_init: 2.5e-4,
            warmup_epochs: 100,
            max_epochs: 1000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 || self.warmup_epochs > self.max_epochs {
            return Err(Error::config(format!(
                "need 0 < warmup_epochs ({}) <= max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(Error::config("lr_init must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.max_epochs {
            return Err(Error::usage(format!(
                "epoch {epoch} outside 0..{}",
                self.max_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.lr_init * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let span = (self.max_epochs - self.warmup_epochs) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        Ok(self.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

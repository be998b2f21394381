use std::collections::BTreeMap;

use super::{ParamStore, Tensor2D};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor2D, Tensor2D)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry from its accumulated
    /// gradient. Gradients are left in place; call `zero_grad` afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            if !p.grad.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for `{name}`")));
            }
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                (
                    Tensor2D::zeros(p.value.rows(), p.value.cols()),
                    Tensor2D::zeros(p.value.rows(), p.value.cols()),
                )
            });
            let g = p.grad.data();
            let w = p.value.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

//! AdamW with decoupled weight decay.

use crate::error::{GtrError, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers, one per parameter, kept in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hp: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<E: Element>(hp: AdamWConfig, store: &ParamStore<E>) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.tensor.numel()])
                .collect()
        };
        AdamW {
            hp,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` counts as a
    /// zero gradient. Frozen parameters are left untouched.
    ///
    /// `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected
    /// moments.
    pub fn step<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Vec<E>>],
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(GtrError::contract(format!(
                "optimizer state for {} parameters, store has {}, {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hp;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let data = e.tensor.data_mut();
            if let Some(g) = &grads[i] {
                if g.len() != data.len() {
                    return Err(GtrError::dim("adamw", &[data.len()], &[g.len()]));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j].f64());
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mut theta = data[j].f64();
                theta -= lr * weight_decay * theta;
                theta -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                data[j] = E::of(theta);
            }
        }
        Ok(())
    }
}

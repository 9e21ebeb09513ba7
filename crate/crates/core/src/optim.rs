//! AdamW with decoupled weight decay and the warmup-cosine learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    /// `θ ← θ (1 - lr·wd)`, then the bias-corrected Adam step.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::Shape("gradients do not match the optimizer state".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((theta, g), m), v) in store.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in theta.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup · total` steps, then cosine decay to 0.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64, warmup: f64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = (warmup.clamp(0.0, 1.0) * total).round();
    if step < warm {
        return peak * step / warm;
    }
    let span = total - warm;
    if span <= 0.0 {
        return peak;
    }
    let progress = (step - warm) / span;
    0.5 * peak * (1.0 + (PI * progress).cos())
}

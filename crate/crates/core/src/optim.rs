//! Adam with bias correction and a warmup then inverse square root learning
//! rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Learning rate at 1-based step `t`: linear warmup to `base_lr`, then
    /// decay by sqrt(warmup/t). The two branches agree at t = warmup.
    pub fn lr_at(&self, t: u64) -> f64 {
        assert!(t >= 1, "schedule steps are 1-based");
        let t = t as f64;
        let w = self.warmup_steps as f64;
        self.base_lr * (t / w).min((w / t).sqrt())
    }
}

pub struct Adam {
    cfg: OptimConfig,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Result<Adam> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            step: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Completed update count.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update in place. Returns the learning rate used.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                store.len()
            )));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        self.step += 1;
        let t = self.step;
        let lr = self.cfg.lr_at(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..grads.len() {
            let g = grads.tensor(i).data();
            let m = self.m.tensor_mut(i).data_mut();
            let v = self.v.tensor_mut(i).data_mut();
            let p = store.value_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

//! Warm-up + cosine learning-rate schedule, AdamW and momentum SGD.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Linear ramp from 0 to `base_lr` over the warm-up, then half-cosine decay to
    /// 0 at `total_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Biases, norm parameters and learned tokens are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm") || name.ends_with("_token"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Array2::zeros(g.dim()));
                self.v.insert(name.clone(), Array2::zeros(g.dim()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.get_mut(name).expect("inserted");
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let m = self.m.get(name).expect("inserted");
            let v = self.v.get(name).expect("inserted");
            let eps = self.eps;
            Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * wd * *p;
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buf: ParamStore,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buf: ParamStore::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let mut d = g.clone();
            if self.weight_decay != 0.0 && decays(name) {
                d.scaled_add(self.weight_decay, p);
            }
            let d = match self.buf.get_mut(name) {
                Some(b) => {
                    b.mapv_inplace(|x| x * self.momentum);
                    *b += &d;
                    b.clone()
                }
                None => {
                    self.buf.insert(name.clone(), d.clone());
                    d
                }
            };
            p.scaled_add(-lr, &d);
        }
    }
}

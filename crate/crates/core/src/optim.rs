//! First-order optimizers acting on a subset of a [`ParamStore`].

use std::collections::BTreeMap;

use crate::tape::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v <- m·v + g; p <- p - lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub(crate) velocity: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let Some(p) = store.get_mut(id) else { continue };
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((val, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                *vel = self.momentum * *vel + g;
                *val -= self.lr * *vel;
            }
        }
    }

    /// Drops state for parameters that no longer exist.
    pub fn retain(&mut self, store: &ParamStore) {
        self.velocity.retain(|id, _| store.get(*id).is_some());
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) t: u64,
    pub(crate) moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, moments: BTreeMap::new() }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in ids {
            let Some(p) = store.get_mut(id) else { continue };
            let (m, v) = self.moments.entry(id).or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let it = p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((val, &g), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

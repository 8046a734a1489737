//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

/// Adam with optional decoupled weight decay (AdamW).
///
/// For plain Adam a nonzero `weight_decay` is applied as L2 regularization
/// added to the gradient.
pub struct Adam {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(kind: OptimizerKind, store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Mat::zeros(e.value.rows, e.value.cols)).collect::<Vec<_>>();
        Adam { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.data.len() {
                let mut gi = g.data[i];
                if self.kind == OptimizerKind::Adam && self.weight_decay != 0.0 {
                    gi += self.weight_decay * p.data[i];
                }
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                if self.kind == OptimizerKind::AdamW && self.weight_decay != 0.0 {
                    p.data[i] -= self.lr * self.weight_decay * p.data[i];
                }
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

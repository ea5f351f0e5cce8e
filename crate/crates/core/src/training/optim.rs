//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::{ParamStore, Tensor};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every trainable parameter that received a gradient.
    /// Decay applies to matrices only, not to 1-D parameters (biases,
    /// norms). Deterministic iteration order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, &Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            if !param.requires_grad() {
                continue;
            }
            let n = param.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if param.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let data = param.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * data[i]);
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use super::param::ParamStore;

/// Adam with bias correction. `step` counts completed updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default)]
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            let n = p.value.len();
            let (val, grad, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                val[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.grad.fill(0.0);
        }
    }
}

/// Adam on the `store`: convenience wrapper around [`Adam::step`].
pub fn adam_step(store: &mut ParamStore, adam: &mut Adam) {
    adam.step(store);
}

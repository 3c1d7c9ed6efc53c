//! Adam with decoupled weight decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. Parameters without a gradient still receive weight decay
    /// and moment decay, as if their gradient were zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if c.weight_decay != 0.0 {
                p.mapv_inplace(|x| x * decay);
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            match grads.get(id) {
                Some(g) => {
                    ndarray::Zip::from(m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| x * b1);
                    v.mapv_inplace(|x| x * b2);
                }
            }
            if lr != 0.0 {
                ndarray::Zip::from(p).and(&self.m[id.0]).and(&self.v[id.0]).for_each(|p, &m, &v| {
                    *p = *p - step_size * m / (v.sqrt() / bc2_sqrt + eps);
                });
            }
        }
    }
}

//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment estimates, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self { config, step: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    /// One update over every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort();
        for &id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = &grads[&id];
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * c.weight_decay * *pv;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut HashMap<ParamId, Tensor>, max: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut cfg = AdamWConfig::with_lr(0.1);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg, store.len());
        for _ in 0..500 {
            let g = store.value(id).map(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &HashMap::from([(id, g)]));
        }
        for &x in store.value(id).data() {
            assert!((x - 1.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let b = store.add("b", Tensor::scalar(0.0));
        let mut g = HashMap::from([(a, Tensor::new(vec![2], vec![3.0, 0.0])), (b, Tensor::scalar(4.0))]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[&b].item(), 4.0);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[&a].data()[0] - 0.6).abs() < 1e-15 && (g[&b].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert_eq!(warmup_cosine(0, 10, 100), 0.1);
        assert_eq!(warmup_cosine(9, 10, 100), 1.0);
        assert_eq!(warmup_cosine(10, 10, 100), 1.0);
        assert!(warmup_cosine(55, 10, 100) < 0.51 && warmup_cosine(55, 10, 100) > 0.49);
        assert!(warmup_cosine(100, 10, 100).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5 }, 1);
        opt.step(&mut store, &HashMap::from([(id, Tensor::scalar(0.0))]));
        // zero gradient: only the decay term moves the parameter
        assert!((store.value(id).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0));
        store.set_trainable(id, false);
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1), 1);
        opt.step(&mut store, &HashMap::from([(id, Tensor::scalar(1.0))]));
        assert_eq!(store.value(id).item(), 2.0);
    }
}

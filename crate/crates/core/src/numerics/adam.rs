use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Vec<f64>> { s.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect() };
        Self {
            config,
            m: zeros(store),
            v: zeros(store),
            step: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of updates skipped because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one bias-corrected Adam update at learning rate `lr` to every
    /// trainable parameter with a gradient. Returns `false` (and leaves all
    /// parameters untouched) when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> bool {
        if !grads.all_finite() {
            self.skipped += 1;
            log::warn!(
                "adam: skipping step with non-finite gradient ({} skipped so far)",
                self.skipped
            );
            return false;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn one_param(v: Vec<f64>) -> (ParamStore, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(v));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut store, id) = one_param(vec![1.0, -2.0, 0.5]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = Gradients::new(&store);
        grads.accumulate(id, &[0.3, -4.0, 1e-2], 1.0);
        adam.step(&mut store, &grads, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - (1.0 - 0.1)).abs() < 1e-5);
        assert!((w[1] - (-2.0 + 0.1)).abs() < 1e-5);
        assert!((w[2] - (0.5 - 0.1)).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = one_param(vec![1.0, 2.0]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = Gradients::new(&store);
        grads.accumulate(id, &[0.0, 0.0], 1.0);
        adam.step(&mut store, &grads, 0.1);
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (mut store, id) = one_param(vec![1.0]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = Gradients::new(&store);
        grads.accumulate(id, &[f64::NAN], 1.0);
        assert!(!adam.step(&mut store, &grads, 0.1));
        assert_eq!(adam.skipped(), 1);
        assert_eq!(adam.step_count(), 0);
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let (mut store, id) = one_param(vec![3.0, -1.5, 0.7]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            let mut grads = Gradients::new(&store);
            for (pid, gr) in g.param_grads() {
                grads.accumulate(pid, gr, 1.0);
            }
            adam.step(&mut store, &grads, 0.05);
        }
        for &v in store.value(id).data() {
            assert!(v.abs() < 1e-3, "{v}");
        }
    }
}

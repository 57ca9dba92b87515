//! Adam with decoupled weight decay.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every trainable parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let moments = || -> Vec<Option<Tensor>> {
            store
                .iter()
                .map(|(_, e)| e.trainable.then(|| Tensor::zeros(e.value.shape().to_vec())))
                .collect()
        };
        AdamW {
            config,
            step: 0,
            first: moments(),
            second: moments(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Trainable parameters without an
    /// entry in `grads` are treated as having zero gradient:
    ///
    /// `w ← w·(1 − lr·λ) − lr·m̂ / (sqrt(v̂) + eps)`
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut lookup: Vec<Option<&Tensor>> = vec![None; self.first.len()];
        for (id, g) in grads {
            lookup[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let (Some(m), Some(v)) = (self.first[i].as_mut(), self.second[i].as_mut()) else {
                continue;
            };
            let w = store.get_mut(id).data_mut();
            let g = lookup[i].map(Tensor::data);
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = m.data()[k] / c1;
                let v_hat = v.data()[k] / c2;
                w[k] = w[k] * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store3(w: [f64; 3]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(w.to_vec()), true).unwrap();
        s.add("buffer", Tensor::vector(vec![5.0]), false).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let (mut s, id) = store3([1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[], 1e-3);
        let expect = [1.0, -2.0, 0.5].map(|w| w * (1.0 - 1e-3 * 0.01));
        assert_eq!(s.get(id).data(), &expect);
        assert_eq!(s.by_name("buffer").unwrap().data(), &[5.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_hand_stepped_scalar_adamw() {
        // loss = Σ c_i w_i² on three parameters, three steps
        let c = [0.5, -1.5, 2.0];
        let cfg = AdamWConfig {
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.1,
        };
        let lr = 0.05;
        let (mut s, id) = store3([1.0, 2.0, -0.7]);
        let mut opt = AdamW::new(cfg, &s);

        let mut w = [1.0, 2.0, -0.7];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for t in 1..=3 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * w[i]).collect();
            opt.step(&mut s, &[(id, Tensor::vector(g.clone()))], lr);
            for i in 0..3 {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - cfg.beta1.powi(t));
                let vh = v[i] / (1.0 - cfg.beta2.powi(t));
                w[i] -= lr * cfg.weight_decay * w[i];
                w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
            for i in 0..3 {
                assert!((s.get(id).data()[i] - w[i]).abs() < 1e-10);
            }
        }
        assert_eq!(opt.steps(), 3);
    }
}

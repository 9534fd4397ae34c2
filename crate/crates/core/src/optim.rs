use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Heavy-ball SGD: `v ← μ·v + g; θ ← θ − lr·v`.
    #[default]
    Sgd,
    /// Adam with `β1 = momentum`, `β2 = beta2`, ε = 1e-8 and bias correction.
    Adam,
}

/// Gradient-descent settings. `momentum = 0` is plain SGD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sgd,
            lr: 0.05,
            momentum: 0.9,
            beta2: 0.999,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            lr,
            ..Self::default()
        }
    }
}

/// First-order optimizer holding per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    velocity: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps = self.steps.saturating_add(1);
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter(|p| p.tensor.requires_grad())
                    .filter_map(|p| p.tensor.grad())
                    .flat_map(|g| g.iter())
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (lr, mu, scale) = (T::lit(self.cfg.lr), T::lit(self.cfg.momentum), T::lit(scale));
        let b2 = T::lit(self.cfg.beta2);
        let one = T::one();
        let correction1 = one - mu.powi(self.steps);
        let correction2 = one - b2.powi(self.steps);
        let eps = T::lit(1e-8);
        for (idx, p) in store.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let vel = self.velocity[idx].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            match self.cfg.algorithm {
                Algorithm::Sgd => {
                    for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                        *v = mu * *v + *g * scale;
                        *w -= lr * *v;
                    }
                }
                Algorithm::Adam => {
                    let sec = self.second[idx].get_or_insert_with(|| vec![T::zero(); grad.len()]);
                    for (((w, m), s), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(sec.iter_mut()).zip(&grad) {
                        let g = *g * scale;
                        *m = mu * *m + (one - mu) * g;
                        *s = b2 * *s + (one - b2) * g * g;
                        *w -= lr * (*m / correction1) / ((*s / correction2).sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_lr_leaves_weights_bitwise() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()).unwrap();
        store.get_mut("w").unwrap().accumulate_grad(&[1.0, 2.0]).unwrap();
        let before = store.get("w").unwrap().clone();
        let mut opt = Optimizer::new(OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        });
        opt.step(&mut store);
        assert_eq!(store.get("w").unwrap().data(), before.data());
    }

    #[test]
    fn frozen_params_skipped() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        store.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        store.set_trainable(|_| false);
        Optimizer::new(OptimizerConfig::default()).step(&mut store);
        assert_eq!(store.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn plain_sgd_step() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        store.get_mut("w").unwrap().accumulate_grad(&[0.5]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            clip_norm: None,
            ..OptimizerConfig::sgd(0.1, 0.0)
        });
        opt.step(&mut store);
        assert!((store.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert!(store.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // Bias correction makes the first update exactly lr·sign(g).
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        store.get_mut("w").unwrap().accumulate_grad(&[0.3, -2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            clip_norm: None,
            ..OptimizerConfig::adam(0.01)
        });
        opt.step(&mut store);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] - 1.01).abs() < 1e-9, "{w:?}");
    }
}

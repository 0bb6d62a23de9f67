use serde::{Deserialize, Serialize};

use crate::autograd::params::ParameterStore;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// SGD with momentum and an exponentially decaying learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub total_iters: u64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            final_lr: 1e-3,
            total_iters: 120_000,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > self.final_lr && self.final_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy base > final > 0, got {} and {}",
                self.base_lr, self.final_lr
            )));
        }
        if self.total_iters < 1 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation from `base_lr` at iteration 0 to `final_lr` at `total_iters`.
pub fn lr_at(iter: u64, cfg: &OptimizerConfig) -> f64 {
    let iter = iter.min(cfg.total_iters);
    if iter == 0 {
        return cfg.base_lr;
    }
    if iter == cfg.total_iters {
        return cfg.final_lr;
    }
    let frac = iter as f64 / cfg.total_iters as f64;
    cfg.base_lr * (cfg.final_lr / cfg.base_lr).powf(frac)
}

/// One momentum step: `m ← μ·m + g + wd·w`, `w ← w − lr·m`. Clears the gradients.
pub fn sgd_step<T: Real>(store: &mut ParameterStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if !store.has_grads() {
        return Err(Error::Contract("sgd step without accumulated gradients".into()));
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        let Some(g) = store.take_grad(id) else { continue };
        let mut m = std::mem::take(store.momentum_mut(id));
        let w = store.data_mut(id);
        for ((wi, mi), gi) in w.iter_mut().zip(m.iter_mut()).zip(g) {
            *mi = mu * *mi + gi + wd * *wi;
            *wi -= lr * *mi;
        }
        *store.momentum_mut(id) = m;
    }
    store.clear_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::params::Gradients;

    fn one_param(w: f64) -> (ParameterStore<f64>, crate::autograd::ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("w", vec![1], vec![w], true).unwrap();
        (s, id)
    }

    fn push_grad(s: &mut ParameterStore<f64>, id: crate::autograd::ParamId, g: f64) {
        let mut grads = Gradients::new(s.len());
        grads.accumulate(id, &[g]);
        s.accumulate(&grads);
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = OptimizerConfig {
            total_iters: 1000,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.1);
        assert_eq!(lr_at(1000, &cfg), 0.001);
        assert!((lr_at(500, &cfg) - 0.01).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = lr_at(i, &cfg);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = one_param(1.0);
        push_grad(&mut s, id, 1.0);
        sgd_step(&mut s, 0.1, 0.0, 0.0).unwrap();
        assert!((s.data(id)[0] - 0.9).abs() < 1e-15);
        assert!(s.grad(id).is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, id) = one_param(0.0);
        for _ in 0..2 {
            push_grad(&mut s, id, 1.0);
            sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((s.data(id)[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let (mut s, id) = one_param(0.5);
        push_grad(&mut s, id, 0.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.data(id)[0], 0.5);
    }

    #[test]
    fn missing_gradients_are_rejected() {
        let (mut s, _) = one_param(0.5);
        assert!(sgd_step(&mut s, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            final_lr: 0.2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

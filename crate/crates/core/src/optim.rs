//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "invalid optimizer settings {self:?}: need lr >= 0, betas in [0, 1), eps > 0, weight_decay >= 0"
            )))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) first: Vec<Tensor>,
    pub(crate) second: Vec<Tensor>,
    pub(crate) step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub(crate) fn from_parts(config: AdamWConfig, first: Vec<Tensor>, second: Vec<Tensor>, step: u64) -> Self {
        AdamW {
            config,
            first,
            second,
            step,
        }
    }

    /// One update: `p *= 1 - lr*wd`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::dim(
                "adamw",
                format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), self.first.len()),
            ));
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            g.same_shape(p, "adamw")?;
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pv *= decay;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar AdamW written out longhand.
    fn reference(mut x: f64, steps: usize, cfg: AdamWConfig, grad: impl Fn(f64) -> f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = grad(x);
            x *= 1.0 - cfg.lr * cfg.weight_decay;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        x
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // f(x) = (x - 3)^2
        let cfg = AdamWConfig {
            lr: 0.05,
            ..AdamWConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.5)).unwrap();
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..100 {
            let x = store.get(id).item();
            opt.step(&mut store, &[Tensor::scalar(2.0 * (x - 3.0))]).unwrap();
        }
        let expected = reference(0.5, 100, cfg, |x| 2.0 * (x - 3.0));
        assert!((store.get(id).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(1, 3, vec![0.1, -2.5, 1e-7]).unwrap()).unwrap();
        let before = store.clone();
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Tensor::new(1, 3, vec![1.0, -1.0, 3.0]).unwrap()]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn decoupled_decay_is_applied_first() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        assert!((store.get(id).item() - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(2, 2)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(opt.step(&mut store, &[]).is_err());
        assert!(opt.step(&mut store, &[Tensor::zeros(1, 2)]).is_err());
        assert!(AdamWConfig { beta1: 1.0, ..AdamWConfig::default() }.validate().is_err());
    }
}

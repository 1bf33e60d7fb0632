//! AdamW with a warmup-linear learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{c, Real, Tensor};

/// Optimizer hyperparameters shared by fine-tuning and continued pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.01,
            warmup_proportion: 0.06,
        }
    }
}

/// Warmup-linear schedule: rises linearly to `peak_lr` over the first
/// `warmup_proportion * total_steps` steps, then decays linearly to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_proportion: f64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_steps: warmup_proportion * total_steps as f64,
            total_steps,
        }
    }

    /// Learning rate used by the `t`-th update (1-based); `t = 0` gives 0.
    pub fn lr_at(&self, t: u64) -> f64 {
        let t = t as f64;
        let total = self.total_steps as f64;
        if self.warmup_steps > 0.0 && t <= self.warmup_steps {
            return self.peak_lr * t / self.warmup_steps;
        }
        if total <= self.warmup_steps {
            return 0.0;
        }
        (self.peak_lr * (total - t) / (total - self.warmup_steps)).max(0.0)
    }
}

/// Moments and step counter for a set of named parameters.
#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub schedule: Schedule,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, schedule: Schedule) -> Self {
        Self {
            config,
            schedule,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update over every trainable parameter,
    /// followed by zeroing the gradients.
    ///
    /// Every parameter that requires a gradient must have one; the error names
    /// the first that does not and nothing is updated.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let mut params: Vec<(&str, &mut Tensor<T>)> =
            params.into_iter().filter(|(_, p)| p.requires_grad()).collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
        self.step += 1;
        let lr = self.schedule.lr_at(self.step);
        let cfg = self.config;
        let (b1, b2) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2));
        let bc1 = c::<T>(1.0 - power(cfg.beta1, self.step));
        let bc2 = c::<T>(1.0 - power(cfg.beta2, self.step));
        let eps = c::<T>(cfg.epsilon);
        let lr_t = c::<T>(lr);
        let decay = c::<T>(1.0 - lr * cfg.weight_decay);
        let one = T::one();

        for (name, param) in params.iter_mut() {
            let n = param.numel();
            let (m, v) = self
                .moments
                .entry(String::from(*name))
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grad: Vec<T> = param.grad().expect("checked above").to_vec();
            let values = param.values_mut();
            for i in 0..n {
                let g = grad[i];
                if cfg.weight_decay != 0.0 {
                    values[i] = values[i] * decay;
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            param.zero_grad();
        }
        Ok(())
    }
}

/// `base^exp` by repeated multiplication. `powi` lowers to an LLVM intrinsic
/// whose rounding depends on the optimization level, which made release and
/// test builds train differently.
fn power(base: f64, exp: u64) -> f64 {
    (0..exp).fold(1.0, |acc, _| acc * base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap().with_grad()
    }

    /// Scalar AdamW written out independently of the vectorised update.
    fn oracle_step(theta: f64, g: f64, m: f64, v: f64, t: i32, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> (f64, f64, f64) {
        let theta = theta * (1.0 - lr * wd);
        let m = b1 * m + (1.0 - b1) * g;
        let v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        (theta - lr * mh / (vh.sqrt() + eps), m, v)
    }

    fn constant_schedule(lr: f64) -> Schedule {
        // No warmup, effectively flat over the handful of steps tested.
        Schedule {
            peak_lr: lr,
            warmup_steps: 0.0,
            total_steps: u64::MAX / 2,
        }
    }

    #[test]
    fn single_step_matches_scalar_oracle() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f32>::new(cfg, constant_schedule(0.1));
        let mut p = param(&[0.5]);
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step([("w", &mut p)]).unwrap();
        let (expect, _, _) = oracle_step(0.5, 1.0, 0.0, 0.0, 1, 0.1, 0.9, 0.98, 1e-6, 0.0);
        assert!((p.values()[0] as f64 - expect).abs() < 1e-6);
        // First bias-corrected step moves by almost exactly lr.
        assert!((expect - 0.4).abs() < 1e-5);
        assert_eq!(p.grad().unwrap(), &[0.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn several_steps_match_oracle() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f64>::new(cfg, Schedule::new(1e-2, 0.06, 50));
        let mut p = Tensor::<f64>::new(vec![1], vec![0.3]).unwrap().with_grad();
        let (mut theta, mut m, mut v) = (0.3, 0.0, 0.0);
        for t in 1..=10u64 {
            let g = (t as f64 * 0.7).sin();
            p.accumulate_grad(&[g]).unwrap();
            opt.step([("w", &mut p)]).unwrap();
            let lr = opt.schedule.lr_at(t);
            (theta, m, v) = oracle_step(theta, g, m, v, t as i32, lr, 0.9, 0.98, 1e-6, 0.01);
            assert!((p.values()[0] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(5e-5, 0.06, 1000);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(60) - 5e-5).abs() < 1e-18);
        assert!((s.lr_at(30) - 2.5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(1000), 0.0);
        assert!((s.lr_at(530) - 2.5e-5).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f64>::new(cfg, constant_schedule(0.1));
        let mut p = Tensor::<f64>::new(vec![2], vec![2.0, -4.0]).unwrap().with_grad();
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        opt.step([("w", &mut p)]).unwrap();
        assert_eq!(p.values(), &[2.0 * (1.0 - 0.1 * 0.01), -4.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn zero_gradient_zero_decay_is_bitwise_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f32>::new(cfg, constant_schedule(0.3));
        let init = [0.123_456_7f32, -9.87, 1e-30];
        let mut p = param(&init);
        for _ in 0..3 {
            p.accumulate_grad(&[0.0; 3]).unwrap();
            opt.step([("w", &mut p)]).unwrap();
        }
        assert_eq!(p.values(), &init);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default(), constant_schedule(0.1));
        let mut a = param(&[1.0]);
        a.accumulate_grad(&[1.0]).unwrap();
        let mut b = param(&[1.0]);
        let err = opt.step([("a", &mut a), ("layer.b", &mut b)]).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("layer.b")));
        assert_eq!(a.values(), &[1.0]);
    }
}

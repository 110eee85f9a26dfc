//! AdamW with decoupled weight decay and a warmup + cosine LR schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter moment buffers plus the shared step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One AdamW update for every trainable tensor that has a gradient.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves the parameters and state unchanged.
    pub fn step<'p, T: Float>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'p mut Tensor<T>)>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::contract(format!("learning rate must be >= 0, got {lr}")));
        }
        let params: Vec<(String, &mut Tensor<T>)> = params
            .into_iter()
            .filter(|(name, t)| t.requires_grad() && grads.get(name).is_some())
            .collect();
        for (name, t) in &params {
            let g = grads.get(name).expect("filtered above");
            if g.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, t) in params {
            let g = grads.get(&name).expect("filtered above");
            let st = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            });
            for (((p, &g), m), v) in t
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let g = g.f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mut x = p.f64();
                x -= lr * weight_decay * x;
                x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = T::of(x);
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay from `lr_max` to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        if !(lr_min <= lr_max) || lr_min < 0.0 {
            return Err(Error::contract(format!("need 0 <= lr_min <= lr_max, got {lr_min} / {lr_max}")));
        }
        if total_steps == 0 || warmup_steps > total_steps {
            return Err(Error::contract(format!(
                "need warmup_steps <= total_steps and total_steps > 0, got {warmup_steps} / {total_steps}"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
            warmup_steps,
        })
    }
}

/// Learning rate at `step` (`0 ..= total_steps`).
pub fn cosine_lr(schedule: &LrSchedule, step: usize) -> Result<f64> {
    let LrSchedule {
        lr_max,
        lr_min,
        total_steps,
        warmup_steps,
    } = *schedule;
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule length {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(lr_max * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(lr_max);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_min + (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, g: f64) -> (Tensor<f64>, Gradients<f64>) {
        let p = Tensor::from_f64(&[1], &[v]).unwrap().with_requires_grad(true);
        let mut grads = Gradients::default();
        grads.by_name.insert("p".into(), Tensor::from_f64(&[1], &[g]).unwrap());
        (p, grads)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut p, grads) = one_param(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step([("p".to_string(), &mut p)], &grads, 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_lr_without_decay_is_bitwise_noop() {
        let (mut p, grads) = one_param(0.123456789, -3.0);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step([("p".to_string(), &mut p)], &grads, 0.0).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_state() {
        let (mut p, mut grads) = one_param(1.0, f64::NAN);
        grads.by_name.get_mut("p").unwrap().data_mut()[0] = f64::INFINITY;
        let mut opt = AdamW::new(AdamWConfig::default());
        match opt.step([("p".to_string(), &mut p)], &grads, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let (mut p, grads) = one_param(0.5, 0.25);
            let mut opt = AdamW::new(AdamWConfig::default());
            for _ in 0..10 {
                opt.step([("p".to_string(), &mut p)], &grads, 1e-3).unwrap();
            }
            p
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn cosine_schedule_examples() {
        let s = LrSchedule::new(2e-4, 0.0, 110, 10).unwrap();
        assert_eq!(cosine_lr(&s, 10).unwrap(), 2e-4);
        assert_eq!(cosine_lr(&s, 110).unwrap(), 0.0);
        assert!((cosine_lr(&s, 60).unwrap() - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(&s, 5).unwrap() - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(&s, 111).is_err());
        assert!(LrSchedule::new(1.0, 2.0, 10, 0).is_err());
        assert!(LrSchedule::new(1.0, 0.0, 10, 11).is_err());
    }
}

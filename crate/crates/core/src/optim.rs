//! AdamW with decoupled weight decay, plus the polynomial learning-rate
//! schedule `lr_i = lr0 * (1 - i / iter_max)^0.9`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
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
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "AdamW betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("AdamW eps must be > 0, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "AdamW weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

struct Slot {
    name: String,
    param: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Decoupled-weight-decay Adam over a set of named parameters.
///
/// Per step, for every parameter value p with gradient g:
///
/// ```text
/// p  <- p * (1 - lr * wd)
/// m  <- b1*m + (1-b1)*g
/// v  <- b2*v + (1-b2)*g^2
/// p  <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// ```
///
/// Gradients are left untouched; the caller clears them between steps.
pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            step_count: 0,
            slots: Vec::new(),
        })
    }

    pub fn register(&mut self, name: impl Into<String>, param: &Tensor) {
        self.slots.push(Slot {
            name: name.into(),
            param: param.clone(),
            first_moment: vec![0.0; param.numel()],
            second_moment: vec![0.0; param.numel()],
        });
    }

    pub fn register_all<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a Tensor)>) {
        for (name, p) in params {
            self.register(name, p);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_params(&self) -> usize {
        self.slots.iter().map(|s| s.param.numel()).sum()
    }

    /// One optimizer step at learning rate `lr`. Errors if any registered
    /// parameter has no populated gradient.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        for slot in &self.slots {
            if slot.param.grad().is_none() {
                return Err(Error::MissingGrad {
                    name: slot.name.clone(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for slot in &mut self.slots {
            let grad = slot.param.grad().expect("checked above");
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
            let m = &mut slot.first_moment;
            let v = &mut slot.second_moment;
            slot.param.update_data(|data| {
                for i in 0..data.len() {
                    data[i] *= 1.0 - lr * wd;
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Clear gradients on every registered parameter.
    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }

    /// Fill a zero gradient into any registered parameter that has none.
    /// A parameter that sits outside the current graph has gradient zero by
    /// definition (e.g. box type vectors while box prompting is off).
    pub fn backfill_zero_grads(&self) {
        for slot in &self.slots {
            slot.param.ensure_zero_grad();
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }
}

/// Polynomial decay schedule with fixed exponent 0.9 and lr(iter_max) == 0.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub lr0: f64,
    pub iter_max: u64,
    pub exponent: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, iter_max: u64) -> Result<Self> {
        if lr0 < 0.0 {
            return Err(Error::Config(format!("lr0 must be >= 0, got {lr0}")));
        }
        if iter_max == 0 {
            return Err(Error::Config("iter_max must be positive".into()));
        }
        Ok(LrSchedule {
            lr0,
            iter_max,
            exponent: 0.9,
        })
    }

    /// Learning rate at iteration `i` in `[0, iter_max]`.
    pub fn at(&self, i: u64) -> Result<f64> {
        if i > self.iter_max {
            return Err(Error::Config(format!(
                "iteration {i} beyond iter_max {}",
                self.iter_max
            )));
        }
        let frac = 1.0 - i as f64 / self.iter_max as f64;
        Ok(self.lr0 * frac.powf(self.exponent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let p = Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap();
        p.set_requires_grad(true);
        p.ensure_zero_grad();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        opt.register("p", &p);
        opt.step(0.1).unwrap();
        assert_eq!(p.to_vec(), vec![1.5, -0.5]);
    }

    #[test]
    fn single_step_matches_scalar_recurrence() {
        // Independent hand-rolled evaluation of the decoupled update for
        // w=1, g=1, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0.1.
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.1);
        let mut w_ref: f64 = 1.0;
        let g = 1.0;
        w_ref *= 1.0 - lr * wd;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat: f64 = m / (1.0 - b1);
        let v_hat: f64 = v / (1.0 - b2);
        w_ref -= lr * m_hat / (v_hat.sqrt() + eps);

        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        p.update_data(|_| {});
        p.ensure_zero_grad();
        p.zero_grad();
        // install grad = 1 by backward on identity sum
        let loss = p.sum_all();
        crate::tensor::backward(&loss).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.register("w", &p);
        opt.step(lr).unwrap();
        assert!((p.item() - w_ref).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_it() {
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        opt.register("w", &p);
        let mut prev = p.item();
        for _ in 0..2 {
            p.zero_grad();
            let loss = p.sum_all(); // d loss / d p = 1
            crate::tensor::backward(&loss).unwrap();
            opt.step(0.05).unwrap();
            assert!(p.item() < prev, "step should move against +1 gradient");
            prev = p.item();
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.register("decoder.head.weight", &p);
        let err = opt.step(0.1).unwrap_err();
        assert!(err.to_string().contains("decoder.head.weight"));
    }

    #[test]
    fn config_validation() {
        assert!(AdamW::new(AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        })
        .is_err());
        assert!(AdamW::new(AdamWConfig {
            eps: 0.0,
            ..AdamWConfig::default()
        })
        .is_err());
        assert!(AdamW::new(AdamWConfig {
            weight_decay: -0.1,
            ..AdamWConfig::default()
        })
        .is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::new(5e-3, 200).unwrap();
        assert_eq!(s.at(0).unwrap(), 5e-3);
        assert_eq!(s.at(200).unwrap(), 0.0);
        let mid = s.at(100).unwrap();
        let expect = 5e-3 * (0.5f64).powf(0.9);
        assert!((mid - expect).abs() < 1e-15);
        assert!(s.at(201).is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let s = LrSchedule::new(1e-3, 57).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=57 {
            let lr = s.at(i).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}

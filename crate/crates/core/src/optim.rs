//! AdamW with decoupled weight decay plus a cosine learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that has a gradient entry. Decay is
    /// decoupled and applied to the parameter before the moment update, so a
    /// zero gradient still shrinks the weight by lr * wd * w.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in &grads.by_name {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::Training(format!("gradient for unknown parameter {name}"))
            })?;
            if !p.requires_grad {
                continue;
            }
            if g.len() != p.numel() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let w = &mut p.data[i];
                *w -= self.lr * self.weight_decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.check_finite(name)?;
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule needs 0 <= step <= total, got step {step} of {total}"
        )));
    }
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> IndexMap<String, Tensor> {
        let mut p = IndexMap::new();
        p.insert("w".to_string(), Tensor::new(vec![1], vec![v]).param());
        p
    }

    fn grad_of(v: f64) -> Gradients {
        let mut g = Gradients::default();
        g.by_name.insert("w".to_string(), vec![v]);
        g
    }

    #[test]
    fn first_step_with_unit_gradient() {
        // With zero decay the very first step moves by -lr / (1 + eps).
        let mut params = single_param(0.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut params, &grad_of(1.0)).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params["w"].data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        // Zero gradient leaves the moments at zero, so the update is pure
        // decay: w <- w - lr * wd * w.
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(3e-4, 1e-5);
        opt.step(&mut params, &grad_of(0.0)).unwrap();
        assert!((params["w"].data[0] - (1.0 - 3e-9)).abs() < 1e-18);
    }

    #[test]
    fn decay_applies_before_adam_update() {
        let mut params = single_param(2.0);
        let mut opt = AdamW::new(0.01, 0.1);
        opt.step(&mut params, &grad_of(1.0)).unwrap();
        // decay first: 2.0 * (1 - 0.01*0.1) = 1.998, then -0.01/(1+1e-8)
        let expected = 2.0 * (1.0 - 0.001) - 0.01 / (1.0 + 1e-8);
        assert!((params["w"].data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn moments_accumulate_over_steps() {
        let mut params = single_param(0.0);
        let mut opt = AdamW::new(0.1, 0.0);
        // Two identical unit-gradient steps; compute the reference by hand.
        opt.step(&mut params, &grad_of(1.0)).unwrap();
        opt.step(&mut params, &grad_of(1.0)).unwrap();
        let mut w = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        }
        assert!((params["w"].data[0] - w).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 3e-4).unwrap(), 3e-4);
        assert!(cosine_lr(100, 100, 3e-4).unwrap().abs() < 1e-19);
        assert!((cosine_lr(50, 100, 3e-4).unwrap() - 1.5e-4).abs() < 1e-19);
    }

    #[test]
    fn cosine_schedule_rejects_out_of_range() {
        assert!(cosine_lr(101, 100, 3e-4).is_err());
        assert!(cosine_lr(0, 0, 3e-4).is_err());
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let mut params = single_param(0.0);
        let mut g = Gradients::default();
        g.by_name.insert("nope".to_string(), vec![1.0]);
        assert!(AdamW::new(0.1, 0.0).step(&mut params, &g).is_err());
    }
}

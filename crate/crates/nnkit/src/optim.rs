//! AdamW with decoupled weight decay, plain Adam, and a linear-warmup cosine
//! learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

impl AdamW {
    pub fn step(&self, store: &mut ParamStore, rate: f64) -> Result<()> {
        self.step_with(store, |_| rate)
    }

    /// One update with a per-parameter learning rate looked up by name.
    /// Gradients are left in place.
    pub fn step_with(&self, store: &mut ParamStore, rate_of: impl Fn(&str) -> f64) -> Result<()> {
        store.check_finite_grads()?;
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let rate = rate_of(&p.name);
            let decay = 1.0 - rate * self.weight_decay;
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                values[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adam with optional L2 penalty folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }
}

impl Adam {
    pub fn step(&self, store: &mut ParamStore, rate: f64) -> Result<()> {
        store.check_finite_grads()?;
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..values.len() {
                let g = grads[i] + self.l2 * values[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                values[i] -= rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then half-cosine decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    warmup: usize,
    total: usize,
    peak: f64,
}

impl Schedule {
    pub fn new(warmup: usize, total: usize, peak: f64) -> Result<Self> {
        if total == 0 || total < warmup {
            return invalid(format!(
                "schedule needs 0 < total and warmup <= total (warmup {warmup}, total {total})"
            ));
        }
        if !(peak > 0.0 && peak.is_finite()) {
            return invalid(format!("peak rate must be positive, got {peak}"));
        }
        Ok(Self {
            warmup,
            total,
            peak,
        })
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// Rate at `step`. Steps past `total` return 0.
    pub fn rate(&self, step: usize) -> f64 {
        if step > self.total {
            return 0.0;
        }
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total - self.warmup;
        if span == 0 {
            return self.peak;
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64, g: f64) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::vector(vec![p])).unwrap();
        s.accumulate_grad(id, &Tensor::vector(vec![g])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(1.25, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 1.25);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_rate() {
        // m̂ = g, v̂ = g², so Δp = −rate · g / (|g| + ε).
        let (mut s, id) = scalar_store(0.0, 1.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, 0.1).unwrap();
        let expect = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expect).abs() < 1e-15);
        // gradients untouched
        assert_eq!(s.grad(id).data()[0], 1.0);
    }

    #[test]
    fn pure_decay() {
        let (mut s, id) = scalar_store(2.0, 0.0);
        let opt = AdamW {
            weight_decay: 1e-3,
            ..AdamW::default()
        };
        opt.step(&mut s, 1.0).unwrap();
        assert!((s.value(id).data()[0] - 2.0 * (1.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, _) = scalar_store(0.0, f64::NAN);
        let err = AdamW::default().step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::new(1000, 5000, 1e-3).unwrap();
        assert_eq!(s.rate(0), 0.0);
        assert_eq!(s.rate(1000), 1e-3);
        assert!((s.rate(500) - 0.5e-3).abs() < 1e-18);
        assert!((s.rate(3000) - 0.5e-3).abs() < 1e-15);
        assert!(s.rate(5000).abs() < 1e-18);
        assert_eq!(s.rate(6000), 0.0);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        let s = Schedule::new(10, 100, 2.0).unwrap();
        assert!((s.rate(9) - s.rate(10)).abs() <= 0.2 + 1e-12);
        assert!(Schedule::new(10, 5, 1.0).is_err());
        assert!(Schedule::new(0, 5, 0.0).is_err());
    }
}

use std::collections::HashMap;

use crate::error::{invalid, NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

/// Named parameters with their gradients and optimizer moments, kept in
/// insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
    by_name: HashMap<String, usize>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return invalid(format!("duplicate parameter `{name}`"));
        }
        let shape = value.shape().to_vec();
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| NnError::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Optimizer moments `(m, v)`.
    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != g.shape() {
            return invalid(format!(
                "gradient shape {:?} does not match parameter `{}` {:?}",
                g.shape(),
                p.name,
                p.grad.shape()
            ));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Copies values from `other` for every parameter present in both stores.
    /// Shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let Some(&j) = other.by_name.get(&p.name) else {
                return invalid(format!("checkpoint lacks parameter `{}`", p.name));
            };
            let src = &other.params[j].value;
            if src.shape() != p.value.shape() {
                return invalid(format!(
                    "parameter `{}` has shape {:?} in checkpoint but {:?} in model",
                    p.name,
                    src.shape(),
                    p.value.shape()
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn check_finite_grads(&self) -> Result<()> {
        for p in &self.params {
            if !p.grad.is_finite() {
                return Err(NnError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn grads_and_moments_start_at_zero() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::full(&[2, 2], 3.0)).unwrap();
        assert_eq!(s.grad(id).shape(), &[2, 2]);
        assert_eq!(s.grad(id).sum(), 0.0);
        let (m, v) = s.moments(id);
        assert_eq!(m.sum() + v.sum(), 0.0);
    }

    #[test]
    fn accumulate_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.accumulate_grad(id, &Tensor::zeros(&[3])).is_err());
        s.accumulate_grad(id, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.accumulate_grad(id, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(s.grad(id).data(), &[2.0, 4.0]);
        s.zero_grad();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros(&[2])).unwrap();
        s.accumulate_grad(id, &Tensor::vector(vec![3.0, 4.0])).unwrap();
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}

//! Named parameter storage, gradient accumulators and the Adam optimizer.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

impl Param {
    pub fn adam_steps(&self) -> u64 {
        self.steps
    }

    /// First and second Adam moments.
    pub fn adam_moments(&self) -> (&Tensor, &Tensor) {
        (&self.m, &self.v)
    }
}

/// Parameters with their gradients and Adam moments.
///
/// Cloning a store is how frozen snapshots are handed to rollout workers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            steps: 0,
        });
        self.by_name.insert(name, id);
        id
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Restores Adam moments and step count, e.g. when resuming training.
    pub fn set_adam_state(&mut self, id: ParamId, m: Tensor, v: Tensor, steps: u64) -> Result<()> {
        let p = &mut self.params[id.0];
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(NnError::Checkpoint(format!("{}: optimizer state shape mismatch", p.name)));
        }
        p.m = m;
        p.v = v;
        p.steps = steps;
        Ok(())
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

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.value(id).len()).sum()
    }

    /// Concatenated values of `ids`, in order.
    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel(ids));
        for &id in ids {
            out.extend_from_slice(self.value(id).data());
        }
        out
    }

    pub fn flat_grads(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel(ids));
        for &id in ids {
            out.extend_from_slice(self.grad(id).data());
        }
        out
    }

    pub fn set_flat_values(&mut self, ids: &[ParamId], flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(ids), "flat parameter length");
        let mut off = 0;
        for &id in ids {
            let v = self.value_mut(id).data_mut();
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        }
    }

    /// Copies every parameter value from `other`, matching by name and shape.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {}", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One Adam update of `ids` from their accumulated gradients.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if !store.grad(id).all_finite() {
                return Err(NnError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        for &id in ids {
            let p = &mut store.params[id.0];
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((x, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_all(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step(store, &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_advances_counter() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 3.0]));
        Adam::default().step_all(&mut s).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.param(id).adam_steps(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m1 = 0.1, v1 = 0.001; bias-corrected both give 1 → Δθ = -lr · 1/(1 + 1e-8).
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(0.0));
        s.grad_mut(id).data_mut()[0] = 1.0;
        Adam::with_lr(0.1).step_all(&mut s).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert!((s.value(id).item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_converges_to_sign_step() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![2], vec![0.0, 0.0]));
        let adam = Adam::with_lr(0.01);
        let mut last = s.value(id).clone();
        let mut delta = vec![0.0; 2];
        for _ in 0..2000 {
            s.grad_mut(id).data_mut().copy_from_slice(&[3.0, -0.02]);
            adam.step_all(&mut s).unwrap();
            let now = s.value(id).clone();
            delta = now.data().iter().zip(last.data()).map(|(a, b)| a - b).collect();
            last = now;
        }
        assert!((delta[0] + 0.01).abs() < 1e-6);
        assert!((delta[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(1.0));
        let b = s.add("b", Tensor::scalar(2.0));
        s.grad_mut(a).data_mut()[0] = 0.5;
        s.grad_mut(b).data_mut()[0] = f64::NAN;
        let err = Adam::default().step_all(&mut s).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(s.value(a).item(), 1.0);
        assert_eq!(s.param(a).adam_steps(), 0);
    }

    #[test]
    fn flat_roundtrip() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = s.add("b", Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let flat = s.flat_values(&[a, b]);
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
        s.set_flat_values(&[b, a], &[9.0, 8.0, 7.0, 6.0]);
        assert_eq!(s.value(a).data(), &[7.0, 6.0]);
        assert_eq!(s.value(b).data(), &[9.0, 8.0]);
    }
}

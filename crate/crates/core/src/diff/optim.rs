use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// First and second moment estimates.
    pub m: Tensor,
    pub v: Tensor,
    /// Excluded from weight decay (biases, norms).
    pub no_decay: bool,
}

/// Named trainable tensors plus their optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, DiffError> {
        self.insert(name, value, false)
    }

    /// Adds a parameter that AdamW does not decay.
    pub fn add_no_decay(&mut self, name: &str, value: Tensor) -> Result<ParamId, DiffError> {
        self.insert(name, value, true)
    }

    fn insert(&mut self, name: &str, value: Tensor, no_decay: bool) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            no_decay,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
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

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar trainables.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * g` to the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.parameters() {
            let acc = self.params[id.0].grad.data_mut();
            for (a, b) in acc.iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    /// Gradient of every parameter flattened in store order.
    pub fn flat_grad(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Overwrites every value from a flat vector in store order.
    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Replaces values (keeping names and order) from another store.
    pub fn copy_values_from(&mut self, other: &ParameterStore) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value.data_mut().copy_from_slice(q.value.data());
        }
    }

    /// Clears the AdamW moments.
    pub fn reset_moments(&mut self) {
        for p in &mut self.params {
            p.m.data_mut().iter_mut().for_each(|v| *v = 0.0);
            p.v.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Gaussian initialization `N(0, std^2)`.
pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decay {
    Constant,
    /// Linear warmup, then `1 / sqrt(step)` decay.
    WarmupInvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay: Decay,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_steps: 0,
            decay: Decay::Constant,
        }
    }

    pub fn warmup_inv_sqrt(base_lr: f64, warmup_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps: warmup_steps.max(1),
            decay: Decay::WarmupInvSqrt,
        }
    }

    /// Learning rate for the 0-based optimizer step.
    pub fn lr(&self, step: u64) -> f64 {
        match self.decay {
            Decay::Constant => self.base_lr,
            Decay::WarmupInvSqrt => {
                let s = (step + 1) as f64;
                let w = self.warmup_steps.max(1) as f64;
                self.base_lr * (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update with decoupled weight decay, using the stored gradients.
/// `step` is 0-based and drives both the schedule and bias correction.
pub fn adamw_step(store: &mut ParameterStore, schedule: &Schedule, step: u64, opt: &AdamW) -> f64 {
    let lr = schedule.lr(step);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for p in &mut store.params {
        let decay = if p.no_decay { 0.0 } else { opt.weight_decay };
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
        }
        let (m, v) = (p.m.data(), p.v.data());
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
            w[i] -= lr * (update + decay * w[i]);
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Graph;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut store = ParameterStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let before = store.flat_values();
        adamw_step(&mut store, &Schedule::constant(0.1), 0, &AdamW::default());
        assert_eq!(store.flat_values(), before);
    }

    fn quad_grad(store: &mut ParameterStore, target: &[f64], curv: &[f64]) -> f64 {
        let id = store.id("x").unwrap();
        let mut g = Graph::new();
        let x = g.param(store, id);
        let t = g.constant(Tensor::vector(target.to_vec()));
        let c = g.constant(Tensor::vector(curv.to_vec()));
        let d = g.sub(x, t).unwrap();
        let d2 = g.mul(d, d).unwrap();
        let w = g.mul(d2, c).unwrap();
        let loss = g.sum(w);
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&grads, 1.0);
        value
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParameterStore::new();
        store.add("x", Tensor::vector(vec![1.0])).unwrap();
        quad_grad(&mut store, &[0.0], &[1.0]);
        adamw_step(&mut store, &Schedule::constant(0.1), 0, &AdamW::default());
        assert!(store.flat_values()[0] < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x) = 3 (x0 - 1)^2 + 0.5 (x1 + 2)^2, optimum 0 at (1, -2)
        let mut store = ParameterStore::new();
        store.add("x", Tensor::vector(vec![4.0, 3.0])).unwrap();
        let sched = Schedule::warmup_inv_sqrt(0.5, 10);
        let mut loss = f64::INFINITY;
        for step in 0..200 {
            loss = quad_grad(&mut store, &[1.0, -2.0], &[3.0, 0.5]);
            adamw_step(&mut store, &sched, step, &AdamW::default());
        }
        let final_loss = quad_grad(&mut store, &[1.0, -2.0], &[3.0, 0.5]);
        assert!(final_loss < 1e-6, "loss {final_loss} (previous {loss})");
    }

    #[test]
    fn schedule_continuous_and_positive() {
        let s = Schedule::warmup_inv_sqrt(1e-3, 100);
        let before = s.lr(98);
        let at = s.lr(99);
        let after = s.lr(100);
        assert!((at - 1e-3).abs() < 1e-15);
        assert!((at - before).abs() < 2e-5 && (at - after).abs() < 2e-5);
        for step in [0, 1, 10, 1000, 1_000_000] {
            assert!(s.lr(step) > 0.0);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(store.add("a", Tensor::scalar(2.0)), Err(DiffError::DuplicateParameter(_))));
    }
}

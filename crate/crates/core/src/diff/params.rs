//! Named parameter store with gradient buffers and Adam state.

use super::{Array, DiffError};
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Entry {
    value: Array,
    grad: Array,
    m: Array,
    v: Array,
}

/// All learnable state of a model: values, gradient accumulators, and Adam
/// first/second moments, keyed by unique name. Iteration order is the sorted
/// name order, which keeps every downstream consumer deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<(), DiffError> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: Array::zeros(&shape),
                m: Array::zeros(&shape),
                v: Array::zeros(&shape),
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn value(&self, name: &str) -> Result<&Array, DiffError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array, DiffError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Array, DiffError> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn adam_moments(&self, name: &str) -> Result<(&Array, &Array), DiffError> {
        self.entries
            .get(name)
            .map(|e| (&e.m, &e.v))
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn adam_step_count(&self) -> u64 {
        self.step
    }

    /// Restore optimizer state when loading a checkpoint.
    pub fn set_adam_state(&mut self, name: &str, m: Array, v: Array, step: u64) -> Result<(), DiffError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_adam_state",
                lhs: e.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        e.m = m;
        e.v = v;
        self.step = step;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<(), DiffError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        debug_assert_eq!(e.grad.numel(), g.len());
        for (dst, &src) in e.grad.data_mut().iter_mut().zip(g.iter()) {
            *dst += src;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Scale all gradients, e.g. to average over a batch of backward passes.
    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g *= c;
            }
        }
    }

    /// One Adam update over every parameter, then zero the gradients.
    ///
    /// A NaN gradient anywhere aborts before mutating anything and names the
    /// offending parameter.
    pub fn optimizer_step(&mut self, learning_rate: f64) -> Result<(), DiffError> {
        for (name, e) in &self.entries {
            if e.grad.data().iter().any(|v| v.is_nan()) {
                return Err(DiffError::NanGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for e in self.entries.values_mut() {
            let g = e.grad.data();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            let p = e.value.data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            e.grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}

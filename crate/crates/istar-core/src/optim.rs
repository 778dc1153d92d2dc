//! Named trainable tensors and the Adam update.

use indexmap::IndexMap;

use crate::autodiff::Graph;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One trainable tensor with its gradient slot and Adam moments.
#[derive(Clone)]
pub struct ParamEntry<T: Element> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Adam first moment.
    pub m: Tensor<T>,
    /// Adam second moment.
    pub v: Tensor<T>,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which makes checkpoints and updates deterministic.
#[derive(Clone)]
pub struct ParamStore<T: Element> {
    entries: IndexMap<String, ParamEntry<T>>,
    step: u64,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate name {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name,
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
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

    /// Total number of trainable scalars.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(T::ZERO);
        }
    }

    /// Pull gradients of every named leaf in `graph` into the matching
    /// entry, accumulating additively. Unknown names are an error.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for (name, grad) in graph.param_grads() {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::invalid("accumulate_grads", format!("unknown param {name}")))?;
            if entry.grad.shape() != grad.shape() {
                return Err(Error::shape(
                    "accumulate_grads",
                    format!("{name}: {:?} vs {:?}", entry.grad.shape(), grad.shape()),
                ));
            }
            for (d, s) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
                *d += *s;
            }
        }
        Ok(())
    }

    /// Bias-corrected Adam update; gradients are zeroed afterwards and the
    /// step counter advances by one.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        let t = self.step + 1;
        let b1 = T::from_f64(beta1);
        let b2 = T::from_f64(beta2);
        let one = T::ONE;
        let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
        let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
        let lr_t = T::from_f64(lr);
        let eps_t = T::from_f64(eps);
        for e in self.entries.values_mut() {
            let g = e.grad.data();
            let m = e.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * *gi;
            }
            let v = e.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
            }
            let val = e.value.data_mut();
            for i in 0..val.len() {
                let m_hat = e.m.data()[i] / corr1;
                let v_hat = e.v.data()[i] / corr2;
                val[i] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
            e.grad.data_mut().fill(T::ZERO);
        }
        self.step = t;
    }
}

/// Adam defaults used throughout: beta1, beta2, epsilon.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

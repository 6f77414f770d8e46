//! Named parameter storage, gradient buffers and the two optimizers the
//! search schedule needs.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which optimizer phase owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Graph-operation, projection and classifier weights.
    Operations,
    /// The structure-weight map producing operation logits.
    Structure,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim("param_set", format!("{} expects {:?}, got {:?}", self.names[id.0], self.values[id.0].shape(), value.shape())));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; unset entries are zero.
#[derive(Debug, Clone)]
pub struct Grads {
    values: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { values: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.values[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds another buffer in place; used for the ordered batch reduction.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.values.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.values.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Updates every parameter in `group` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, group: ParamGroup) {
        self.velocity.resize(store.len(), None);
        for id in store.ids() {
            if store.group(id) != group {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let update = if self.momentum > 0.0 {
                let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
                for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = self.momentum * *vi + gi;
                }
                v.clone()
            } else {
                g.clone()
            };
            let lr = self.lr;
            for (p, u) in store.get_mut(id).data_mut().iter_mut().zip(update.data()) {
                *p -= lr * u;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, group: ParamGroup) {
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids() {
            if store.group(id) != group {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id).data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

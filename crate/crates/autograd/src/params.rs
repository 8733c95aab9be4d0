use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// Persistent state that is never differentiated (e.g. running statistics).
    Buffer,
}

/// Named, ordered collection of model tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn weight(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.add(name, ParamKind::Weight, tensor)
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.add(name, ParamKind::Buffer, tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.ids()
            .filter(|&i| self.kind(i) == ParamKind::Weight)
            .map(|i| self.get(i).len())
            .sum()
    }

    /// Places every tensor on `g`. Weights are trainable only when `trainable`
    /// is set and the graph records; buffers are always constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.kinds)
            .map(|(t, k)| {
                if trainable && *k == ParamKind::Weight {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(&self.tensors)
            .map(|((n, k), t)| (n.as_str(), *k, t))
    }

    /// Replaces tensor values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Graph handles for every entry of a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform initializer in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// He-uniform initializer for a layer with the given fan-in.
pub fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in as f32).sqrt())
}

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f32, beta2: f32) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Applies one update to every weight of `store` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.step_filtered(store, bound, grads, |_| true)
    }

    /// Like [`Adam::step`] but only touches parameters accepted by `filter`.
    pub fn step_filtered(
        &mut self,
        store: &mut ParamStore,
        bound: &Bound,
        grads: &Gradients,
        filter: impl Fn(&str) -> bool,
    ) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.kind(id) != ParamKind::Weight || !filter(store.name(id)) {
                continue;
            }
            let Some(g) = grads.get(bound[id]) else { continue };
            let p = &mut store.tensors[id.0];
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.weight("w", Tensor::from_slice(&[1.0, -1.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..50 {
            let mut g = Graph::new();
            let b = store.bind(&mut g, true);
            let sq = g.square(b[id]);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &b, &grads);
        }
        assert!(store.get(id).max_abs() < 0.2);
    }

    #[test]
    fn buffers_are_not_trainable() {
        let mut store = ParamStore::new();
        let w = store.weight("w", Tensor::from_slice(&[1.0]));
        let b = store.buffer("b", Tensor::from_slice(&[2.0]));
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        assert!(g.requires_grad(bound[w]));
        assert!(!g.requires_grad(bound[b]));
        assert_eq!(store.num_weights(), 1);
    }
}

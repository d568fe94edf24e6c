use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    /// Zero-mean normal with standard deviation `1/sqrt(fan_in)`.
    pub fn init_normal<R: Rng>(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<ParamId> {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_const(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Lazily copies parameters onto a graph as leaves, at most once each.
pub struct ParamVars {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl ParamVars {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        ParamVars {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        t.set_requires_grad(self.trainable);
        let v = g.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    /// Binds `id` to an existing var instead of copying the stored tensor.
    pub fn preset(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = Some(v);
    }

    /// Adds the graph's leaf gradients into the store's tensors.
    pub fn accumulate_into(&self, g: &Graph, store: &mut ParamStore) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(grad) = v.and_then(|v| g.grad(v)) {
                store.tensors[i].accumulate_grad(grad);
            }
        }
    }
}

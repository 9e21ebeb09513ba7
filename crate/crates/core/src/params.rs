//! Named parameter storage shared by every trainable component.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with standard deviation `1 / sqrt(fan_in)`.
    pub fn add_init<R: Rng>(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Places every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }
}

/// Parameters bound to a particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients, zero where a parameter did not contribute.
    pub fn grads(&self, store: &ParamStore, grads: &crate::graph::Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
            .collect()
    }
}

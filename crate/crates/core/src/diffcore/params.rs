use std::collections::HashMap;

use super::real::Real;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Ordered map of named parameter tensors.
///
/// Order is the architecture's declaration order and is what checkpoints
/// serialise, so two models built the same way always write the same bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<'a, T: Real>(&'a self, tape: &mut Tape<T>, requires_grad: bool) -> Bound<'a> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.cast::<T>(), requires_grad))
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Handle of the named parameter. Panics on unknown names (an architecture bug).
    pub fn get(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradients in declaration order, converted back to f32.
    pub fn grads<T: Real>(&self, g: &mut Gradients<T>) -> Vec<Tensor<f32>> {
        self.vars.iter().map(|&v| g.take(v).cast::<f32>()).collect()
    }
}

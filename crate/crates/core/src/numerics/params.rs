use std::collections::HashMap;

use super::graph::{Gradients, Graph};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }

    /// Buffers such as running statistics are stored but never optimized.
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Named, ordered collection of model parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(name, "parameter registered twice"));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_requires_grad(trainable),
            trainable,
        });
        Ok(id)
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds the gradients of every parameter bound in `graph` into the
    /// stored tensors' gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, var) in graph.bound_params() {
            let entry = &mut self.entries[id.0];
            if !entry.trainable {
                continue;
            }
            if let Some(g) = grads.get(var) {
                entry.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Arc<Tensor>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Named tensors in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                tensor: Arc::new(tensor),
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn entry(&self, index: usize) -> (&str, &ParamEntry) {
        let (k, v) = self.entries.get_index(index).expect("param index");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable access; clones the tensor if a graph still shares it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        let (_, e) = self.entries.get_index_mut(index).expect("param index");
        Arc::make_mut(&mut e.tensor)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                e.tensor.shape(),
                tensor.shape()
            )));
        }
        e.tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }
}

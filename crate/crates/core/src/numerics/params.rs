//! Named parameter registry shared by layers, optimizer, and checkpoints.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{IbtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as normalization running statistics.
    Buffer,
}

#[derive(Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    tensor: Tensor,
}

impl Parameter {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// Ordered registry of every parameter and buffer of a model. Insertion order
/// is the canonical order used by checkpoints and reports.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl Clone for ParamStore {
    /// Deep copy with fresh gradient buffers.
    fn clone(&self) -> Self {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(&p.name, p.tensor.to_vec(), p.tensor.shape(), p.kind)
                .expect("names are unique in the source store");
        }
        out
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(IbtError::Config(format!("invalid parameter name {name:?}")));
        }
        if self.index.contains_key(name) {
            return Err(IbtError::Config(format!("duplicate parameter name {name}")));
        }
        let tensor = Tensor::leaf(data, shape, kind == ParamKind::Trainable)?;
        let id = ParamId(self.entries.len());
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Parameter {
            name: name.to_string(),
            kind,
            tensor,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, p)| p.tensor.numel()).sum()
    }

    /// Replaces the values of one entry; its gradient buffer is reset.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &mut self.entries[id.0];
        if data.len() != p.tensor.numel() {
            return Err(IbtError::dim(format!(
                "{}: {} values for shape {:?}",
                p.name,
                data.len(),
                p.tensor.shape()
            )));
        }
        p.tensor = Tensor::leaf(data, p.tensor.shape(), p.kind == ParamKind::Trainable)?;
        Ok(())
    }

    /// Sets every trainable gradient buffer to zeros, so parameters that a
    /// forward pass did not reach end up with a zero gradient.
    pub fn zero_grad(&self) {
        for (_, p) in self.trainable() {
            p.tensor.zero_grad();
        }
    }

    pub fn clear_grad(&self) {
        for (_, p) in self.trainable() {
            p.tensor.clear_grad();
        }
    }
}

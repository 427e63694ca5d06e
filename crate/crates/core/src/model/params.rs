//! Named parameter storage shared by the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat list of named parameter tensors; registration order is stable and
/// defines the optimizer state layout.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replace a tensor by name, shape-checked; used by checkpoint loading.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", name)))?;
        if self.tensors[idx].shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: shape {:?} in file, model expects {:?}",
                name,
                tensor.shape(),
                self.tensors[idx].shape()
            )));
        }
        self.tensors[idx] = tensor;
        Ok(())
    }

    /// Put every parameter on a tape as a leaf. With `trainable`, leaves
    /// require gradients and `backward` will fill them.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        Binding { vars }
    }
}

/// Tape positions of the attached parameters for one forward pass.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collect gradients per parameter after backward; zeros where a
    /// parameter was unused.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.tensors[i].numel()])
            })
            .collect()
    }
}

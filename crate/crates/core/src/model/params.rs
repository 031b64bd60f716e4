use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Tensor};

/// Named parameter arrays in a fixed insertion order. The order is the
/// contract: optimizer state, gradients and checkpoints all line up by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> usize {
        let id = self.values.len();
        self.names.push(name.into());
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn value(&self, idx: usize) -> &Array {
        &self.values[idx]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.values.iter().map(Array::len).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replace every value from a checkpoint, shape-checked name by name.
    pub fn load(&mut self, entries: &[(String, Array)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        for (k, (name, value)) in entries.iter().enumerate() {
            if *name != self.names[k] {
                return Err(Error::Contract(format!(
                    "checkpoint parameter {k} is `{name}`, expected `{}`",
                    self.names[k]
                )));
            }
            if value.shape() != self.values[k].shape() {
                return Err(Error::dimension(
                    format!("parameter `{name}`"),
                    value.shape(),
                    self.values[k].shape(),
                ));
            }
            self.values[k] = value.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of one forward pass, in store order.
pub struct BoundParams<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn bind(store: &ParamStore, tape: &'t Tape) -> Self {
        Self {
            tensors: store.values().iter().map(|a| tape.leaf(a.clone())).collect(),
        }
    }

    pub fn get(&self, idx: usize) -> Tensor<'t> {
        self.tensors[idx]
    }

    /// Gradients in store order, after a backward pass on the same tape.
    pub fn grads(&self) -> Vec<Array> {
        self.tensors.iter().map(|t| t.grad()).collect()
    }
}

//! Named, ordered parameter sets shared by every architecture.
//!
//! Master copies live outside any tape. Each training step binds them onto a
//! fresh tape (copy-in), runs forward/backward, and applies updates back to
//! the master copies — tensors on the tape stay immutable.

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor<F> {
        &self.entries[idx].1
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        &mut self.entries[idx].1
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    /// (name, shape) pairs, in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Name of the first parameter holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Copy every parameter onto `tape` as a leaf. `trainable` controls
    /// whether gradients flow (false for pure evaluation passes).
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, (name, tensor)) in self.entries.iter().enumerate() {
            let id = tape.leaf(tensor.clone(), trainable);
            ids.push(id);
            index.insert(name.clone(), i);
        }
        BoundParams { ids, index }
    }
}

/// Tape handles for one bound parameter set.
pub struct BoundParams {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Handle for a parameter by name. Panics on a missing name: lookups are
    /// an internal layout invariant, not a user input.
    pub fn id(&self, name: &str) -> TensorId {
        match self.index.get(name) {
            Some(&i) => self.ids[i],
            None => panic!("parameter {name:?} is not bound"),
        }
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

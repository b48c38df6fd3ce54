//! Named registry of trainable tensors and non-trainable buffers.

use indexmap::IndexMap;

use crate::tensor::{Elem, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter name {0:?}")]
    UnknownName(String),
}

/// Ordered map of slash-delimited names to tensors. Iteration order is
/// insertion order, which fixes the checkpoint layout.
pub struct ParamStore<T: Elem> {
    entries: IndexMap<String, (Tensor<T>, bool)>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<(), ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        tensor.set_requires_grad(trainable);
        self.entries.insert(name.to_string(), (tensor, trainable));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ParamError> {
        self.entries.get(name).map(|(t, _)| t).ok_or_else(|| ParamError::UnknownName(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries in insertion order: (name, tensor, trainable).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries.iter().map(|(k, (t, tr))| (k.as_str(), t, *tr))
    }

    pub fn iter_trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().filter(|(_, (_, tr))| *tr).map(|(k, (t, _))| (k.as_str(), t))
    }

    /// Total element count across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.iter_trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t, trainable) in self.iter() {
            if trainable {
                t.zero_grad();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("a/w", Tensor::zeros(&[2]), true).unwrap();
        assert!(ps.register("a/w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn iteration_is_insertion_order() {
        let mut ps = ParamStore::<f32>::new();
        for name in ["z", "a", "m"] {
            ps.register(name, Tensor::zeros(&[1]), true).unwrap();
        }
        let names: Vec<&str> = ps.iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }

    #[test]
    fn buffers_excluded_from_trainable() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("bn/running_mean", Tensor::zeros(&[4]), false).unwrap();
        ps.register("conv/weight", Tensor::zeros(&[8]), true).unwrap();
        assert_eq!(ps.trainable_count(), 8);
        assert!(!ps.get("bn/running_mean").unwrap().requires_grad());
    }
}

//! Named parameter storage and per-forward binding into graph leaves.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel_of, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Param {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named `f64` parameter tensors.
///
/// Insertion order is the canonical order used by optimizers and
/// checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: Arc<HashMap<String, usize>>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if numel_of(shape) != data.len() || shape.contains(&0) {
            return Err(TensorError::dim(
                "param",
                format!("`{name}`: shape {shape:?} does not hold {} values", data.len()),
            ));
        }
        if self.index.contains_key(&name) {
            return Err(TensorError::contract("param", format!("duplicate parameter `{name}`")));
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            shape: shape.to_vec(),
            data: Arc::new(data),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(Param::numel).sum()
    }

    /// Mutable access to one entry's values (copy-on-write if shared).
    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        Arc::make_mut(&mut self.entries[i].data).as_mut_slice()
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if data.len() != self.entries[i].numel() {
            return Err(TensorError::dim(
                "param",
                format!("`{name}` holds {} values, got {}", self.entries[i].numel(), data.len()),
            ));
        }
        self.entries[i].data = Arc::new(data);
        Ok(())
    }

    /// Leaves for one forward pass. With `trainable`, each leaf collects a
    /// gradient on backward; otherwise no graph is recorded through them.
    pub fn bind<T: Real>(&self, trainable: bool) -> Binding<T> {
        let tensors = self
            .entries
            .iter()
            .map(|p| {
                Tensor::from_shared(T::share_f64(&p.data), &p.shape, trainable)
                    .expect("parameter shapes are validated on insert")
            })
            .collect();
        Binding {
            tensors,
            index: Arc::clone(&self.index),
        }
    }
}

/// Graph leaves for every parameter of a [`ParamStore`].
#[derive(Clone)]
pub struct Binding<T: Real> {
    tensors: Vec<Tensor<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Real> Binding<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Gradients in store order; `None` where nothing reached a leaf.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.tensors.iter().map(Tensor::grad).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", &[2], vec![1.0, 2.0]).unwrap();
        assert!(s.insert("w", &[1], vec![0.0]).is_err());
        assert!(s.insert("v", &[3], vec![0.0]).is_err());
        assert_eq!(s.num_params(), 2);
    }

    #[test]
    fn binding_shares_f64_storage() {
        let mut s = ParamStore::new();
        s.insert("w", &[2], vec![1.0, 2.0]).unwrap();
        let b: Binding<f64> = s.bind(true);
        let w = b.get("w").unwrap();
        assert!(w.requires_grad());
        assert_eq!(w.data().as_ptr(), s.get("w").unwrap().data().as_ptr());
        w.sqr().sum().backward().unwrap();
        assert_eq!(b.grads()[0].as_deref(), Some(&[2.0, 4.0][..]));
        let frozen: Binding<f32> = s.bind(false);
        assert!(!frozen.get("w").unwrap().requires_grad());
        assert!(b.get("nope").is_err());
    }
}

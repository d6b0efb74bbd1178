use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Structural(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.shape().numel()).sum()
    }

    /// Replace the value of `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Structural(format!("unknown parameter '{name}'")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}' has shape {}, got {}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    /// Record every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

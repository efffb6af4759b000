//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Suffixes of non-trainable batch-norm statistics.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Ordered map from parameter name to tensor. Iteration is lexicographic
/// by name, which is also the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Trainable tensors only (batch-norm running statistics excluded).
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| !is_buffer(k))
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Zero tensors with the shapes of every trainable entry.
    pub fn zeros_like_trainable(&self) -> Self {
        ParameterStore { tensors: self.trainable().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape()))).collect() }
    }

    /// Adds `t` into the entry `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, t: &[T], shape: &[usize]) {
        match self.tensors.get_mut(name) {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(t) {
                    *a += v;
                }
            }
            None => {
                self.tensors.insert(name.to_string(), Tensor::from_vec(shape, t.to_vec()).expect("accumulate shape"));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParameterStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParameterStore { tensors: iter.into_iter().collect() }
    }
}

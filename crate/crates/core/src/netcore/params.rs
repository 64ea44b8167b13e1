use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How an entry takes part in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    /// Updated by the optimizer.
    Trainable,
    /// Never changes after construction.
    Frozen,
    /// Running statistics, updated by forward passes in training mode.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub role: ParamRole,
}

impl<T> ParamEntry<T> {
    pub fn trainable(&self) -> bool {
        self.role == ParamRole::Trainable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter store in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
    pub buffers: usize,
}

impl ParamCount {
    /// Trainable plus frozen weights; buffers are statistics, not parameters.
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, role: ParamRole) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, ParamEntry { tensor, role });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> (&str, &ParamEntry<T>) {
        let (k, v) = self.entries.get_index(id.0).expect("valid id");
        (k, v)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for e in self.entries.values() {
            match e.role {
                ParamRole::Trainable => c.trainable += e.tensor.len(),
                ParamRole::Frozen => c.frozen += e.tensor.len(),
                ParamRole::Buffer => c.buffers += e.tensor.len(),
            }
        }
        c
    }

    /// Entries whose names start with `prefix`, used to freeze or count
    /// sub-networks.
    pub fn count_prefix(&self, prefix: &str) -> ParamCount {
        let mut sub = ParamSet::new();
        for (k, v) in &self.entries {
            if k.starts_with(prefix) {
                sub.entries.insert(k.clone(), v.clone());
            }
        }
        sub.count()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: v.tensor.cast(),
                            role: v.role,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Total scalar parameter count, trainable and frozen reported separately.
pub fn param_count<T: Scalar>(params: &ParamSet<T>) -> ParamCount {
    params.count()
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Grads {
            tensors: params.iter().map(|(_, _, e)| Tensor::zeros(e.tensor.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(T::zero()));
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Inserts freshly initialized parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T, R> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut R) -> Self {
        ParamBuilder {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<F, O>(&mut self, name: &str, f: F) -> O
    where
        F: FnOnce(&mut ParamBuilder<'_, T, R>) -> O,
    {
        let prefix = self.name(name);
        let mut child = ParamBuilder {
            params: &mut *self.params,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut child)
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn add(&mut self, leaf: &str, tensor: Tensor<T>, role: ParamRole) -> ParamId {
        let name = self.name(leaf);
        self.params.insert(name, tensor, role).expect("unique parameter names")
    }

    /// He-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        let t = Tensor::from_vec(shape, data).expect("shape");
        self.add(leaf, t, ParamRole::Trainable)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64, role: ParamRole) -> ParamId {
        self.add(leaf, Tensor::full(shape, T::lit(v)), role)
    }
}

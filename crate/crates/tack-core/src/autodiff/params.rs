//! Named parameter storage and initialisation.
//!
//! A [`ParamStore`] owns every trainable tensor by name, in insertion order.
//! Graphs refer to parameters by declared slot name; [`ParamStore::bind`]
//! resolves a graph's slots against the store so `forward` can be fed
//! positionally without string lookups in the hot loop.

use std::collections::HashMap;

use super::graph::Graph;
use super::tensor::{AutodiffError, Scalar, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), index: HashMap::new(), tensors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Insert a tensor under `name`; replaces any existing entry of that name
    /// (shapes must then match, so a checkpoint can't silently resize).
    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<(), AutodiffError> {
        if let Some(&i) = self.index.get(name) {
            if self.tensors[i].shape() != t.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    node: i,
                    msg: format!(
                        "param '{name}' has shape {:?}, refusing {:?}",
                        self.tensors[i].shape(),
                        t.shape()
                    ),
                });
            }
            self.tensors[i] = t;
        } else {
            self.index.insert(name.to_string(), self.tensors.len());
            self.names.push(name.to_string());
            self.tensors.push(t);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, AutodiffError> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, AutodiffError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(AutodiffError::UnknownParam(name.to_string())),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Resolve a graph's parameter slots to tensors, in slot order.
    pub fn bind(&self, graph: &Graph) -> Result<Vec<Tensor<T>>, AutodiffError> {
        let mut out = Vec::with_capacity(graph.param_slots().len());
        for (name, shape) in graph.param_slots() {
            let t = self.get(name)?;
            if t.shape() != &shape[..] {
                return Err(AutodiffError::ShapeMismatch {
                    node: out.len(),
                    msg: format!(
                        "param '{name}': graph wants {:?}, store has {:?}",
                        shape,
                        t.shape()
                    ),
                });
            }
            out.push(t.clone());
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// He-uniform sample in `[-limit, limit]` with `limit = sqrt(6 / fan_in)`.
fn he_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.uniform_in(-limit, limit))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Initialise a 3x3 conv layer: He-uniform weight (fan_in = ci*9), zero bias.
pub fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    co: usize,
    ci: usize,
) {
    store
        .insert(&format!("{name}.w"), he_uniform(rng, &[co, ci, 3, 3], ci * 9))
        .expect("conv weight init");
    store.insert(&format!("{name}.b"), Tensor::zeros(&[co])).expect("conv bias init");
}

/// Initialise a linear layer: He-uniform weight (fan_in = features), zero bias.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    out: usize,
    features: usize,
) {
    store
        .insert(&format!("{name}.w"), he_uniform(rng, &[out, features], features))
        .expect("linear weight init");
    store.insert(&format!("{name}.b"), Tensor::zeros(&[out])).expect("linear bias init");
}

/// Initialise a FiLM generator pair (scale and shift heads off a shared
/// embedding) to the identity: zero weights, bias 1 for scale, 0 for shift.
/// Conditioning then starts as a no-op and the trunk trains first.
pub fn init_film<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, emb: usize) {
    store
        .insert(&format!("{name}.scale.w"), Tensor::zeros(&[channels, emb]))
        .expect("film scale weight");
    store
        .insert(&format!("{name}.scale.b"), Tensor::full(&[channels], T::one()))
        .expect("film scale bias");
    store
        .insert(&format!("{name}.shift.w"), Tensor::zeros(&[channels, emb]))
        .expect("film shift weight");
    store
        .insert(&format!("{name}.shift.b"), Tensor::zeros(&[channels]))
        .expect("film shift bias");
}

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in declaration order.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        // A clone is an independent parameter set, so it must not alias keys.
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform(-bound, bound) with bound = 1/sqrt(fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Bind a parameter onto `g` (idempotent per graph).
    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param((self.id, id.0), &self.tensors[id.0])
    }

    /// Gradients for every parameter, `None` where the loss did not reach it.
    pub fn grads(&self, g: &Graph<T>, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        (0..self.tensors.len())
            .map(|i| {
                g.param_var((self.id, i))
                    .and_then(|v| grads.get(v))
                    .cloned()
            })
            .collect()
    }

    /// Replace every tensor from `other` (same layout), keeping this store's id.
    pub fn load_from(&mut self, names: &[String], tensors: Vec<Tensor<T>>) -> Result<(), String> {
        if names != self.names.as_slice() {
            return Err("parameter names differ from the model layout".into());
        }
        for (i, (cur, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if cur.shape() != new.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    cur.shape()
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            id: fresh_id(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

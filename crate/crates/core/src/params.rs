//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from another store with matching names and shapes.
    pub fn load_from<U: Scalar>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for id in other.ids() {
            let name = other.name(id);
            let target = self
                .find(name)
                .ok_or_else(|| Error::format(format!("unknown parameter {name}")))?;
            let src = other.get(id);
            if src.shape() != self.get(target).shape() {
                return Err(Error::shape("load_params", self.get(target).shape(), src.shape()));
            }
            self.tensors[target.0] = src.cast();
        }
        Ok(())
    }
}

/// Draws initial parameter values. Values are drawn in `f64` and cast, so
/// stores of different precision built from one seed hold the same numbers.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape product matches")
    }

    /// Linear weight `[.., fan_in, fan_out]` with bound 1/sqrt(fan_in).
    pub fn linear<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in = shape[shape.len() - 2].max(1);
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn bias<T: Scalar>(&mut self, fan_in: usize, width: usize) -> Tensor<T> {
        self.uniform(&[width], 1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

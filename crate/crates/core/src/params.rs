//! Named parameter storage shared by every block of the model.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{c, Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered, uniquely named parameter tree.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into each parameter's gradient slot.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Sets every entry of every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
                n += 1;
            }
        }
        n
    }
}

/// One gradient tensor per parameter, aligned with [`ParamStore`] order.
/// Parameters that did not take part in a pass hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients(store.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in &mut self.0 {
            g.scale_assign(k);
        }
    }
}

/// Uniform Xavier/Glorot initialisation for a `fan_in × fan_out` matrix.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| c::<T>(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier shape is consistent")
}

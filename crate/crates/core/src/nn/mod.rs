//! Named parameters and the layers built from them.

mod attention;
mod layers;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use attention::MultiHeadAttention;
pub use layers::{BatchNorm2d, Conv3x3, Embedding, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// A weight excluded from optimization.
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    name: String,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    kind: ParamKind,
}

impl<S: Scalar> Param<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<S> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor<S>> {
        self.grad.as_ref()
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub(crate) fn accumulate_grad(&mut self, g: &Tensor<S>) {
        match &mut self.grad {
            Some(acc) => {
                for (a, &d) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + d;
                }
            }
            None => self.grad = Some(g.clone()),
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Tensor<S>> {
        self.grad.as_mut()
    }
}

/// Ordered collection of named tensors. Registration order is stable and is
/// the order used for reporting and serialization.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>, kind: ParamKind) -> ParamId {
        assert!(!self.by_name.contains_key(name), "parameter {name} registered twice");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            kind,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn set_kind(&mut self, id: ParamId, kind: ParamKind) {
        self.params[id.0].kind = kind;
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// L2 norm over every accumulated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Same parameters converted to another element type (gradients dropped).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn num_elements(&self, kind: Option<ParamKind>) -> usize {
        self.params
            .iter()
            .filter(|p| kind.is_none_or(|k| p.kind == k))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// He-style uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_fn(shape, |_| S::lit(dist.sample(rng)))
}

pub fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| S::lit(dist.sample(rng)))
}

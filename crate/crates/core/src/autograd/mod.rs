//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Because a node can
//! only reference earlier nodes, tape order is already a topological order and
//! `backward` walks it in reverse, visiting each node exactly once.

mod basic;
mod conv;
mod seq;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use conv::{RunningStats, BN_EPS, BN_MOMENTUM};
pub use seq::{AttentionMask, LN_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
pub(crate) trait Backward<S: Scalar> {
    fn backward(&self, tape: &Tape<S>, out: Var, grad: &Tensor<S>, sink: &mut GradSink<S>);
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    backward: Option<Box<dyn Backward<S>>>,
}

/// Records differentiable ops for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(Var, ParamId)>,
    training: bool,
    rng: ChaCha8Rng,
    consumed: bool,
}

impl<S: Scalar> Tape<S> {
    /// A tape in evaluation mode (batch-norm running stats, no dropout).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            consumed: false,
        }
    }

    /// A tape in training mode; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and parameter binding.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Only trainable parameters receive gradients.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let p = store.get(id);
        let var = self.leaf(p.value().clone(), p.is_trainable());
        self.params.push((var, id));
        var
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, inputs: &[Var], backward: impl Backward<S> + 'static) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let tape: &Tape<S> = self;
        let mut sink = GradSink {
            grads: (0..tape.nodes.len()).map(|_| None).collect(),
            wants: tape.nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: tape.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        };
        if !sink.wants[loss.0] {
            return Ok(Gradients { grads: sink.grads });
        }
        sink.grads[loss.0] = Some(Tensor::full(tape.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(bw) = tape.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(grad) = sink.grads[i].take() else {
                continue;
            };
            bw.backward(tape, Var(i), &grad, &mut sink);
        }
        // keep only leaf gradients; intermediates were consumed above
        Ok(Gradients { grads: sink.grads })
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for &(var, id) in &self.params {
            if let Some(g) = grads.get(var) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulates gradient contributions during a backward pass.
pub(crate) struct GradSink<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    wants: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> GradSink<S> {
    pub(crate) fn wants(&self, var: Var) -> bool {
        self.wants[var.0]
    }

    /// Mutable gradient buffer for `var`, allocated as zeros on first use.
    /// Returns `None` when `var` does not take part in differentiation.
    pub(crate) fn slot(&mut self, var: Var) -> Option<&mut [S]> {
        if !self.wants[var.0] {
            return None;
        }
        let shape = &self.shapes[var.0];
        Some(self.grads[var.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    pub(crate) fn add(&mut self, var: Var, delta: &[S]) {
        if let Some(g) = self.slot(var) {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_polynomial() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_stale() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.scale(x, 2.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::StaleTape)));
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn multiple_uses_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(d).is_none());
    }
}

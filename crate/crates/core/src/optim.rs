//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers and step counter. Buffers are indexed like the parameter
/// store and created lazily on a parameter's first non-empty gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Tensor<S>>>,
    second: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<(&Tensor<S>, &Tensor<S>)> {
        match (self.first.get(index), self.second.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// Restores a saved state; `moments[i]` pairs with parameter `i`.
    pub fn restore(step: u64, moments: Vec<Option<(Tensor<S>, Tensor<S>)>>) -> Self {
        let (first, second) = moments
            .into_iter()
            .map(|m| match m {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            })
            .unzip();
        Self {
            step,
            first,
            second,
            ..Self::new()
        }
    }

    /// Applies one update to every trainable parameter holding a gradient.
    ///
    /// All gradients are checked first, so a non-finite gradient aborts the
    /// step without touching any parameter.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = p.grad() {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} contains NaN or infinity",
                        p.name()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        for (i, p) in store.iter_mut().enumerate() {
            if p.kind() != ParamKind::Trainable {
                continue;
            }
            let Some(grad) = p.grad().cloned() else {
                continue;
            };
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let values = p.value_mut().data_mut();
            for (((w, &g), m), v) in values.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gf = g.as_f64();
                let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                *m = S::lit(mf);
                *v = S::lit(vf);
                let update = lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *w = S::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let factor = S::lit(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for v in g.data_mut() {
                    *v = *v * factor;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn store_with(values: &[f64], grad: &[f64]) -> (ParamStore<f64>, crate::nn::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register(
            "w",
            Tensor::from_f64(&[values.len()], values).unwrap(),
            ParamKind::Trainable,
        );
        store
            .get_mut(id)
            .accumulate_grad(&Tensor::from_f64(&[grad.len()], grad).unwrap());
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = store_with(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = AdamState::new();
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).value().data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // bias correction gives m_hat = g, v_hat = g^2 at t = 1
        let g = [0.5, -3.0, 1e-3];
        let (mut store, id) = store_with(&[0.0, 0.0, 0.0], &g);
        let mut adam = AdamState::new();
        let lr = 1e-2;
        adam.step(&mut store, lr).unwrap();
        for (w, g) in store.get(id).value().data().iter().zip(g) {
            let expected = -lr * g / (g.abs() + ADAM_EPS);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let (mut store, id) = store_with(&[0.0], &[2.0]);
        let mut adam = AdamState::new();
        adam.step(&mut store, 0.1).unwrap();
        let after_one = store.get(id).value().data()[0];
        adam.step(&mut store, 0.1).unwrap();
        let after_two = store.get(id).value().data()[0];
        assert!(after_one < 0.0 && after_two < after_one);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut store, id) = store_with(&[1.0], &[f64::NAN]);
        let mut adam = AdamState::new();
        assert!(matches!(adam.step(&mut store, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).value().data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let (mut store, id) = store_with(&[1.0], &[1.0]);
        store.set_kind(id, ParamKind::Frozen);
        AdamState::new().step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).value().data(), &[1.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (mut store, _) = store_with(&[0.0, 0.0], &[3.0, 4.0]);
        let before = clip_grad_norm(&mut store, 1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_gradients_reach_the_store() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), ParamKind::Trainable);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.get(id).grad().unwrap().data(), &[2.0, 4.0]);
    }
}

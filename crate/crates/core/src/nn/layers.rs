use rand::Rng;

use super::{he_uniform, normal, ParamId, ParamKind, ParamStore};
use crate::autograd::{RunningStats, Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// `y = x W^T + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(
            &format!("{name}.weight"),
            he_uniform(&[dout, din], din, rng),
            ParamKind::Trainable,
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[dout]), ParamKind::Trainable);
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv3x3 {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.register(
            &format!("{name}.weight"),
            he_uniform(&[c_out, c_in, 3, 3], c_in * 9, rng),
            ParamKind::Trainable,
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable);
        Self { kernel, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let gamma = store.register(
            &format!("{name}.weight"),
            Tensor::full(&[channels], S::one()),
            ParamKind::Trainable,
        );
        let beta = store.register(
            &format!("{name}.bias"),
            Tensor::zeros(&[channels]),
            ParamKind::Trainable,
        );
        let running_mean = store.register(
            &format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            ParamKind::Buffer,
        );
        let running_var = store.register(
            &format!("{name}.running_var"),
            Tensor::full(&[channels], S::one()),
            ParamKind::Buffer,
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Normalizes `x`; in training mode this also updates the running stats.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &mut ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let mut stats = RunningStats {
            mean: store.get(self.running_mean).value().data().to_vec(),
            var: store.get(self.running_var).value().data().to_vec(),
        };
        let y = tape.batch_norm2d(x, g, b, &mut stats)?;
        if tape.is_training() {
            store
                .get_mut(self.running_mean)
                .value_mut()
                .data_mut()
                .copy_from_slice(&stats.mean);
            store
                .get_mut(self.running_var)
                .value_mut()
                .data_mut()
                .copy_from_slice(&stats.var);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        let gamma = store.register(
            &format!("{name}.weight"),
            Tensor::full(&[width], S::one()),
            ParamKind::Trainable,
        );
        let beta = store.register(&format!("{name}.bias"), Tensor::zeros(&[width]), ParamKind::Trainable);
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Token embedding table `W: [V, d]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub weight: ParamId,
    pub vocab: usize,
    pub width: usize,
}

impl Embedding {
    /// Random `N(0, 1/sqrt(d))` table.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        vocab: usize,
        width: usize,
        kind: ParamKind,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register(
            &format!("{name}.weight"),
            normal(&[vocab, width], 1.0 / (width as f64).sqrt(), rng),
            kind,
        );
        Self { weight, vocab, width }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &[usize],
        shape: &[usize],
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.embedding(w, ids, shape)
    }
}

use rand::Rng;

use super::{Linear, ParamStore};
use crate::autograd::{AttentionMask, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Scalar;

/// Scaled dot-product attention split over `heads` heads, scale `1/sqrt(width/heads)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, rng),
            output: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// `query: [b, l, width]`, `memory: [b, t, width]` -> `[b, l, width]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        query: Var,
        memory: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, query, memory, mask)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the `[b, heads, l, t]` attention weights.
    pub fn forward_with_weights<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        query: Var,
        memory: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var, Var)> {
        let (qs, ms) = (tape.shape(query).to_vec(), tape.shape(memory).to_vec());
        if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != self.width || ms[2] != self.width {
            return shape_err(format!(
                "attention expects [b, l, {w}] and [b, t, {w}], got {qs:?} and {ms:?}",
                w = self.width
            ));
        }
        let (b, l, t) = (qs[0], qs[1], ms[1]);
        let (h, dh) = (self.heads, self.head_dim());

        let split = |tape: &mut Tape<S>, x: Var, len: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, len, h, dh])?;
            tape.permute(x, &[0, 2, 1, 3])
        };
        let q = self.query.forward(tape, store, query)?;
        let q = split(tape, q, l)?;
        let k = self.key.forward(tape, store, memory)?;
        let k = split(tape, k, t)?;
        let v = self.value.forward(tape, store, memory)?;
        let v = split(tape, v, t)?;

        let scores = tape.matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, mask)?;
        let ctx = tape.matmul(weights, v, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, self.width])?;
        let out = self.output.forward(tape, store, ctx)?;
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer() -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = MultiHeadAttention::new(&mut store, "attn", 128, 4, &mut rng).unwrap();
        (store, mha)
    }

    #[test]
    fn width_must_divide_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "attn", 130, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_position_gets_full_weight() {
        let (store, mha) = layer();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 128], |i| (i as f64).sin()));
        let (_, w) = mha.forward_with_weights(&mut tape, &store, x, x, None).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (store, mha) = layer();
        let mut tape = Tape::new();
        let row: Vec<f64> = (0..128).map(|i| (i as f64 * 0.1).cos()).collect();
        let x = tape.constant(Tensor::from_fn(&[1, 5, 128], |i| row[i % 128]));
        let (_, w) = mha.forward_with_weights(&mut tape, &store, x, x, None).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_row_zero_ignores_later_positions() {
        let (store, mha) = layer();
        let mask = AttentionMask::causal(1, 4);
        let run = |bump: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_fn(&[1, 4, 128], |i| {
                let base = (i as f64 * 0.37).sin();
                if i >= 128 {
                    base + bump
                } else {
                    base
                }
            }));
            let y = mha.forward(&mut tape, &store, x, x, Some(&mask)).unwrap();
            tape.value(y).data()[..128].to_vec()
        };
        assert_eq!(run(0.0), run(3.5));
    }
}

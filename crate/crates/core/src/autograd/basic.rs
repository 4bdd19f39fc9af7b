//! Elementwise ops, reductions, layout changes and batched matmul.

use rand::Rng;

use super::{Backward, GradSink, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

struct AddBw(Var, Var);

impl<S: Scalar> Backward<S> for AddBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        sink.add(self.0, grad.data());
        sink.add(self.1, grad.data());
    }
}

struct MulBw(Var, Var);

impl<S: Scalar> Backward<S> for MulBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let (a, b) = (tape.value(self.0).data(), tape.value(self.1).data());
        if let Some(ga) = sink.slot(self.0) {
            for ((g, &u), &bv) in ga.iter_mut().zip(grad.data()).zip(b) {
                *g = *g + u * bv;
            }
        }
        if let Some(gb) = sink.slot(self.1) {
            for ((g, &u), &av) in gb.iter_mut().zip(grad.data()).zip(a) {
                *g = *g + u * av;
            }
        }
    }
}

struct ScaleBw(Var, f64);

impl<S: Scalar> Backward<S> for ScaleBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let c = S::lit(self.1);
        if let Some(g) = sink.slot(self.0) {
            for (g, &u) in g.iter_mut().zip(grad.data()) {
                *g = *g + u * c;
            }
        }
    }
}

struct ReluBw(Var);

impl<S: Scalar> Backward<S> for ReluBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let x = tape.value(self.0).data();
        if let Some(g) = sink.slot(self.0) {
            for ((g, &u), &xv) in g.iter_mut().zip(grad.data()).zip(x) {
                if xv > S::zero() {
                    *g = *g + u;
                }
            }
        }
    }
}

struct SumBw(Var, f64);

impl<S: Scalar> Backward<S> for SumBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let u = grad.item() * S::lit(self.1);
        if let Some(g) = sink.slot(self.0) {
            for g in g.iter_mut() {
                *g = *g + u;
            }
        }
    }
}

struct ReshapeBw(Var);

impl<S: Scalar> Backward<S> for ReshapeBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        sink.add(self.0, grad.data());
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the axis order `perm`.
fn permute_data<S: Scalar>(src: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let offset: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[offset]);
        for axis in (0..idx.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    (out_shape, out)
}

struct PermuteBw {
    input: Var,
    perm: Vec<usize>,
}

impl<S: Scalar> Backward<S> for PermuteBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let mut inverse = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inverse[p] = i;
        }
        let (_, back) = permute_data(grad.data(), grad.shape(), &inverse);
        sink.add(self.input, &back);
    }
}

/// Layout of a batched matmul: `batch` independent `[m,k] x [k,n]` products.
#[derive(Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

struct MatmulBw {
    a: Var,
    b: Var,
    dims: MatmulDims,
}

impl<S: Scalar> Backward<S> for MatmulBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let MatmulDims {
            batch,
            m,
            k,
            n,
            trans_b,
        } = self.dims;
        let (a, b) = (tape.value(self.a).data(), tape.value(self.b).data());
        let g = grad.data();
        // b is [k,n] (row stride n) or, when transposed, stored as [n,k].
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        if let Some(ga) = sink.slot(self.a) {
            for i in 0..batch {
                // dA = dC * B^T
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    &g[i * m * n..],
                    n,
                    1,
                    &b[i * k * n..],
                    csb,
                    rsb,
                    S::one(),
                    &mut ga[i * m * k..],
                    k,
                    1,
                );
            }
        }
        if let Some(gb) = sink.slot(self.b) {
            for i in 0..batch {
                // dB = A^T * dC, written through B's own layout
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    &a[i * m * k..],
                    1,
                    k,
                    &g[i * m * n..],
                    n,
                    1,
                    S::one(),
                    &mut gb[i * k * n..],
                    rsb,
                    csb,
                );
            }
        }
    }
}

struct DropoutBw {
    input: Var,
    mask: Vec<bool>,
    scale: f64,
}

impl<S: Scalar> Backward<S> for DropoutBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let c = S::lit(self.scale);
        if let Some(g) = sink.slot(self.input) {
            for ((g, &u), &keep) in g.iter_mut().zip(grad.data()).zip(&self.mask) {
                if keep {
                    *g = *g + u * c;
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], AddBw(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], MulBw(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let cs = S::lit(c);
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] * cs);
        self.push(value, &[a], ScaleBw(a, c))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::from_fn(x.shape(), |i| {
            let v = x.data()[i];
            if v > S::zero() {
                v
            } else {
                S::zero()
            }
        });
        self.push(value, &[a], ReluBw(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), &[a], SumBw(a, 1.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.numel().max(1) as f64;
        let total: S = x.data().iter().copied().sum();
        let value = Tensor::scalar(total / S::lit(n));
        self.push(value, &[a], SumBw(a, 1.0 / n))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, &[a], ReshapeBw(a)))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank()
            || perm
                .iter()
                .any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(format!("invalid permutation {perm:?} for rank {}", x.rank()));
        }
        let (shape, data) = permute_data(x.data(), x.shape(), perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            &[a],
            PermuteBw {
                input: a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Batched product over shared leading axes: `[.., m, k] x [.., k, n]`,
    /// or `[.., m, k] x [.., n, k]^T` when `trans_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return shape_err(format!("matmul: inner extents {k} and {kb} differ"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    &x[i * m * k..],
                    k,
                    1,
                    &y[i * k * n..],
                    rsb,
                    csb,
                    S::zero(),
                    &mut out[i * m * n..],
                    n,
                    1,
                );
            }
        }
        let dims = MatmulDims {
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(Tensor::new(out_shape, out)?, &[a, b], MatmulBw { a, b, dims }))
    }

    /// Inverted dropout driven by the tape's RNG; identity outside training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let n = self.value(a).numel();
        let mask: Vec<bool> = {
            let rng = self.rng();
            (0..n).map(|_| rng.random::<f64>() >= p).collect()
        };
        let scale = 1.0 / (1.0 - p);
        let x = self.value(a);
        let s = S::lit(scale);
        let value = Tensor::from_fn(x.shape(), |i| if mask[i] { x.data()[i] * s } else { S::zero() });
        self.push(value, &[a], DropoutBw { input: a, mask, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[4, 2], -0.5));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[c, a, b] = x[a, b, c]
        assert_eq!(tape.value(y).data()[6 + 3 + 2], (12 + 2 * 4 + 1) as f64);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn batched_matmul_transposed_matches_plain() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64 - 3.0));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64) * 0.5));
        let bt = tape.permute(b, &[0, 2, 1]).unwrap();
        let c1 = tape.matmul(a, b, false).unwrap();
        let c2 = tape.matmul(a, bt, true).unwrap();
        assert_eq!(tape.shape(c1), &[2, 2, 4]);
        assert_eq!(tape.value(c1), tape.value(c2));
        assert!(tape.matmul(a, a, false).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[10], 1.0));
        assert_eq!(tape.dropout(x, 0.5), x);
        let mut train = Tape::<f32>::training(3);
        let x = train.constant(Tensor::full(&[1000], 1.0));
        let y = train.dropout(x, 0.5);
        let kept = train.value(y).data().iter().filter(|&&v| v == 2.0).count();
        assert!((400..600).contains(&kept));
    }
}

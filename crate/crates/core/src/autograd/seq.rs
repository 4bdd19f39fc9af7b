//! Ops over the trailing (feature) axis used by the sequence decoder.

use std::sync::Arc;

use super::{Backward, GradSink, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Which key positions each query may attend to.
///
/// Stored as `[batch, queries, keys]` and broadcast over attention heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    queries: usize,
    keys: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    pub fn new(batch: usize, queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * queries * keys {
            return shape_err("attention mask size does not match its extents");
        }
        Ok(Self {
            batch,
            queries,
            keys,
            allowed: allowed.into(),
        })
    }

    /// Lower-triangular (inclusive) mask: query `t` sees keys `0..=t`.
    pub fn causal(batch: usize, len: usize) -> Self {
        let allowed = (0..batch * len * len)
            .map(|i| {
                let (q, k) = ((i / len) % len, i % len);
                k <= q
            })
            .collect::<Vec<_>>();
        Self {
            batch,
            queries: len,
            keys: len,
            allowed: allowed.into(),
        }
    }

    /// Every query of item `b` sees the first `valid[b]` keys.
    pub fn key_lengths(queries: usize, keys: usize, valid: &[usize]) -> Self {
        let batch = valid.len();
        let allowed = (0..batch * queries * keys)
            .map(|i| (i % keys) < valid[i / (queries * keys)])
            .collect::<Vec<_>>();
        Self {
            batch,
            queries,
            keys,
            allowed: allowed.into(),
        }
    }

    pub fn allows(&self, batch: usize, query: usize, key: usize) -> bool {
        self.allowed[(batch * self.queries + query) * self.keys + key]
    }
}

struct LinearBw {
    input: Var,
    weight: Var,
    bias: Var,
    rows: usize,
    din: usize,
    dout: usize,
}

impl<S: Scalar> Backward<S> for LinearBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let (rows, din, dout) = (self.rows, self.din, self.dout);
        let g = grad.data();
        if let Some(gb) = sink.slot(self.bias) {
            for r in 0..rows {
                for (b, &u) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                    *b = *b + u;
                }
            }
        }
        if let Some(gw) = sink.slot(self.weight) {
            let x = tape.value(self.input).data();
            // dW[o, i] += sum_r dY[r, o] * X[r, i]
            S::gemm(dout, rows, din, S::one(), g, 1, dout, x, din, 1, S::one(), gw, din, 1);
        }
        if let Some(gx) = sink.slot(self.input) {
            let w = tape.value(self.weight).data();
            S::gemm(rows, dout, din, S::one(), g, dout, 1, w, din, 1, S::one(), gx, din, 1);
        }
    }
}

struct LogSoftmaxBw {
    input: Var,
    width: usize,
}

impl<S: Scalar> Backward<S> for LogSoftmaxBw {
    fn backward(&self, tape: &Tape<S>, out: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let y = tape.value(out).data();
        let m = self.width;
        if let Some(gx) = sink.slot(self.input) {
            for ((gx, g), y) in gx.chunks_mut(m).zip(grad.data().chunks(m)).zip(y.chunks(m)) {
                let total: S = g.iter().copied().sum();
                for j in 0..m {
                    gx[j] = gx[j] + g[j] - y[j].exp() * total;
                }
            }
        }
    }
}

struct SoftmaxBw {
    input: Var,
    width: usize,
}

impl<S: Scalar> Backward<S> for SoftmaxBw {
    fn backward(&self, tape: &Tape<S>, out: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let y = tape.value(out).data();
        let m = self.width;
        if let Some(gx) = sink.slot(self.input) {
            for ((gx, g), y) in gx.chunks_mut(m).zip(grad.data().chunks(m)).zip(y.chunks(m)) {
                let dot: S = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for j in 0..m {
                    gx[j] = gx[j] + y[j] * (g[j] - dot);
                }
            }
        }
    }
}

struct LayerNormBw {
    input: Var,
    gamma: Var,
    beta: Var,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    width: usize,
}

impl<S: Scalar> Backward<S> for LayerNormBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let d = self.width;
        let g = grad.data();
        if let Some(gg) = sink.slot(self.gamma) {
            for (r, row) in g.chunks(d).enumerate() {
                for j in 0..d {
                    gg[j] = gg[j] + S::lit(row[j].as_f64() * self.x_hat[r * d + j]);
                }
            }
        }
        if let Some(gb) = sink.slot(self.beta) {
            for row in g.chunks(d) {
                for j in 0..d {
                    gb[j] = gb[j] + row[j];
                }
            }
        }
        let gamma = tape.value(self.gamma).data();
        if let Some(gx) = sink.slot(self.input) {
            let n = d as f64;
            for (r, row) in g.chunks(d).enumerate() {
                let xh = &self.x_hat[r * d..(r + 1) * d];
                let gxh: Vec<f64> = (0..d).map(|j| row[j].as_f64() * gamma[j].as_f64()).collect();
                let s1: f64 = gxh.iter().sum();
                let s2: f64 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    let v = self.inv_std[r] / n * (n * gxh[j] - s1 - xh[j] * s2);
                    gx[r * d + j] = gx[r * d + j] + S::lit(v);
                }
            }
        }
    }
}

struct EmbeddingBw {
    weight: Var,
    ids: Vec<usize>,
    width: usize,
}

impl<S: Scalar> Backward<S> for EmbeddingBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let d = self.width;
        if let Some(gw) = sink.slot(self.weight) {
            for (i, &id) in self.ids.iter().enumerate() {
                let src = &grad.data()[i * d..(i + 1) * d];
                for (w, &u) in gw[id * d..(id + 1) * d].iter_mut().zip(src) {
                    *w = *w + u;
                }
            }
        }
    }
}

struct NllBw {
    input: Var,
    picks: Vec<(usize, f64)>,
}

impl<S: Scalar> Backward<S> for NllBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let u = grad.item();
        if let Some(gx) = sink.slot(self.input) {
            for &(idx, w) in &self.picks {
                gx[idx] = gx[idx] - u * S::lit(w);
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Affine map over the last axis: `x W^T + b` with `W: [dout, din]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight);
        if ws.len() != 2 || xs.is_empty() {
            return shape_err(format!("linear: weight {ws:?}, input {xs:?}"));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs[xs.len() - 1] != din {
            return shape_err(format!(
                "linear: input width {} does not match weight input width {din}",
                xs[xs.len() - 1]
            ));
        }
        if self.shape(bias) != [dout] {
            return shape_err(format!("linear: bias must have {dout} entries"));
        }
        let rows = self.value(input).numel() / din;
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        S::gemm(
            rows,
            din,
            dout,
            S::one(),
            self.value(input).data(),
            din,
            1,
            self.value(weight).data(),
            1,
            din,
            S::one(),
            &mut out,
            dout,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = dout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[input, weight, bias],
            LinearBw {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            },
        ))
    }

    /// Log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let m = *x.shape().last().unwrap_or(&0);
        if m == 0 {
            return shape_err("log_softmax needs a non-empty last axis");
        }
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(m) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - max - lse));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, &[input], LogSoftmaxBw { input, width: m }))
    }

    /// Softmax over the last axis. With a mask, `input` is `[b, h, q, k]` (or
    /// `[b, q, k]`) and disallowed positions get exactly zero weight.
    pub fn softmax(&mut self, input: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let width = *s.last().unwrap_or(&0);
        if width == 0 {
            return shape_err("softmax needs a non-empty last axis");
        }
        if let Some(m) = mask {
            let ok = match s.len() {
                3 => s == [m.batch, m.queries, m.keys],
                4 => s[0] == m.batch && s[2] == m.queries && s[3] == m.keys,
                _ => false,
            };
            if !ok {
                return shape_err(format!(
                    "softmax mask [{}, {}, {}] does not fit {s:?}",
                    m.batch, m.queries, m.keys
                ));
            }
        }
        let heads = if s.len() == 4 { s[1] } else { 1 };
        let x = self.value(input).data();
        let mut out = vec![S::zero(); x.len()];
        for (r, (row, dst)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let allowed = |k: usize| match mask {
                None => true,
                Some(m) => {
                    let q = r % m.queries;
                    let b = r / (m.queries * heads);
                    m.allows(b, q, k)
                }
            };
            let mut max = S::neg_infinity();
            for (k, &v) in row.iter().enumerate() {
                if allowed(k) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::Shape(format!("softmax row {r} has no allowed position")));
            }
            let mut total = S::zero();
            for (k, &v) in row.iter().enumerate() {
                if allowed(k) {
                    let e = (v - max).exp();
                    dst[k] = e;
                    total = total + e;
                }
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, &[input], SoftmaxBw { input, width }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!("layer_norm: affine parameters must have {d} entries"));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / d;
        let mut x_hat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let xh = (v.as_f64() - mean) * inv;
                x_hat.push(xh);
                out.push(S::lit(g[j].as_f64() * xh + b[j].as_f64()));
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            &[input, gamma, beta],
            LayerNormBw {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                width: d,
            },
        ))
    }

    /// Row lookup: `ids` laid out as `shape` index into `weight: [V, d]`.
    pub fn embedding(&mut self, weight: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ws = self.shape(weight);
        if ws.len() != 2 {
            return shape_err(format!("embedding table must be [V, d], got {ws:?}"));
        }
        let (vocab, d) = (ws[0], ws[1]);
        if ids.len() != shape.iter().product::<usize>() {
            return shape_err("embedding ids do not match the requested shape");
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index { id: bad, size: vocab });
        }
        let w = self.value(weight).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&w[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            &[weight],
            EmbeddingBw {
                weight,
                ids: ids.to_vec(),
                width: d,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `log_probs: [.., m]`.
    ///
    /// Rows with `valid[i] == false` are skipped; the mean is over valid rows.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let s = self.shape(log_probs);
        let m = *s.last().unwrap_or(&0);
        let rows = if m == 0 { 0 } else { self.value(log_probs).numel() / m };
        if targets.len() != rows || valid.len() != rows {
            return shape_err(format!(
                "nll: {} targets / {} flags for {rows} rows",
                targets.len(),
                valid.len()
            ));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let w = 1.0 / count as f64;
        let lp = self.value(log_probs).data();
        let mut picks = Vec::with_capacity(count);
        let mut total = 0.0f64;
        for (r, (&y, &ok)) in targets.iter().zip(valid).enumerate() {
            if !ok {
                continue;
            }
            if y >= m {
                return Err(Error::Index { id: y, size: m });
            }
            total += lp[r * m + y].as_f64();
            picks.push((r * m + y, w));
        }
        let value = Tensor::scalar(S::lit(-total * w));
        Ok(self.push(
            value,
            &[log_probs],
            NllBw {
                input: log_probs,
                picks,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);

        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zw = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let y = tape.linear(x, zw, bias).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert_eq!(row, &[1.0, -2.0, 0.5]);
        }
        assert!(tape.linear(x, bias, bias).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let ln2 = 2f64.ln();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1000.0, 1000.0]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v + ln2).abs() < 1e-12);
        }
        let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 4f64.ln()).abs() < 1e-12);
        assert!((v[1] - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| (i % 5) as f64));
        let mask = AttentionMask::causal(1, 3);
        let y = tape.softmax(x, Some(&mask)).unwrap();
        let v = tape.value(y).data();
        for h in 0..2 {
            let base = h * 9;
            assert_eq!(v[base], 1.0);
            assert_eq!(v[base + 1], 0.0);
            assert_eq!(v[base + 2], 0.0);
            assert_eq!(v[base + 5], 0.0);
            assert!((v[base + 6] + v[base + 7] + v[base + 8] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn key_length_mask() {
        let m = AttentionMask::key_lengths(2, 3, &[1, 3]);
        assert!(m.allows(0, 1, 0) && !m.allows(0, 1, 1));
        assert!(m.allows(1, 0, 2));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| (i * i) as f64));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let e = tape.embedding(w, &[3, 0], &[1, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[6.0, 7.0, 0.0, 1.0]);
        assert!(matches!(
            tape.embedding(w, &[4], &[1]),
            Err(Error::Index { id: 4, size: 4 })
        ));
    }

    #[test]
    fn nll_skips_invalid_rows() {
        let mut tape = Tape::<f64>::new();
        let lp = tape.constant(Tensor::from_f64(&[2, 2], &[-1.0, -2.0, -3.0, -4.0]).unwrap());
        let l = tape.nll(lp, &[1, 0], &[true, false]).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        assert!(matches!(
            tape.nll(lp, &[1, 0], &[false, false]),
            Err(Error::DegenerateBatch)
        ));
    }
}

//! Image-style ops used by the convolutional encoder.

use super::{Backward, GradSink, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

/// Unfolds one `[c, h, w]` image into `[c*9, h*w]` columns (3x3, pad 1).
fn im2col<S: Scalar>(img: &[S], c: usize, h: usize, w: usize, cols: &mut [S]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            S::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
fn col2im_add<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, img: &mut [S]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBw {
    input: Var,
    kernel: Var,
    bias: Var,
    dims: ConvDims,
}

impl<S: Scalar> Backward<S> for Conv2dBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let ConvDims { n, c_in, c_out, h, w } = self.dims;
        let hw = h * w;
        let k9 = c_in * 9;
        let x = tape.value(self.input).data();
        let kernel = tape.value(self.kernel).data();
        let g = grad.data();

        if let Some(gb) = sink.slot(self.bias) {
            for img in 0..n {
                for co in 0..c_out {
                    let s: S = g[(img * c_out + co) * hw..][..hw].iter().copied().sum();
                    gb[co] = gb[co] + s;
                }
            }
        }
        let want_kernel = sink.wants(self.kernel);
        let want_input = sink.wants(self.input);
        if !want_kernel && !want_input {
            return;
        }
        let mut cols = vec![S::zero(); k9 * hw];
        let mut gcols = vec![S::zero(); if want_input { k9 * hw } else { 0 }];
        for img in 0..n {
            let g_img = &g[img * c_out * hw..][..c_out * hw];
            if want_kernel {
                im2col(&x[img * c_in * hw..][..c_in * hw], c_in, h, w, &mut cols);
                let gk = sink.slot(self.kernel).expect("kernel wants grad");
                // dK[co, r] += sum_p dY[co, p] * cols[r, p]
                S::gemm(c_out, hw, k9, S::one(), g_img, hw, 1, &cols, 1, hw, S::one(), gk, k9, 1);
            }
            if want_input {
                // dCols = K^T dY
                S::gemm(
                    k9,
                    c_out,
                    hw,
                    S::one(),
                    kernel,
                    1,
                    k9,
                    g_img,
                    hw,
                    1,
                    S::zero(),
                    &mut gcols,
                    hw,
                    1,
                );
                let gx = sink.slot(self.input).expect("input wants grad");
                col2im_add(&gcols, c_in, h, w, &mut gx[img * c_in * hw..][..c_in * hw]);
            }
        }
    }
}

struct BatchNormBw {
    input: Var,
    gamma: Var,
    beta: Var,
    /// Normalized activations, `[n, c, hw]` layout.
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    c: usize,
    hw: usize,
}

impl<S: Scalar> Backward<S> for BatchNormBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let (c, hw) = (self.c, self.hw);
        let n = grad.numel() / (c * hw);
        let count = (n * hw) as f64;
        let g = grad.data();
        let gamma = tape.value(self.gamma).data();
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for p in 0..hw {
                    let gv = g[base + p].as_f64();
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * self.x_hat[base + p];
                }
            }
        }
        if let Some(gg) = sink.slot(self.gamma) {
            for ch in 0..c {
                gg[ch] = gg[ch] + S::lit(sum_gx[ch]);
            }
        }
        if let Some(gb) = sink.slot(self.beta) {
            for ch in 0..c {
                gb[ch] = gb[ch] + S::lit(sum_g[ch]);
            }
        }
        if let Some(gx) = sink.slot(self.input) {
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let scale = gamma[ch].as_f64() * self.inv_std[ch];
                    for p in 0..hw {
                        let gv = g[base + p].as_f64();
                        let d = if self.batch_stats {
                            scale / count * (count * gv - sum_g[ch] - self.x_hat[base + p] * sum_gx[ch])
                        } else {
                            scale * gv
                        };
                        gx[base + p] = gx[base + p] + S::lit(d);
                    }
                }
            }
        }
    }
}

/// Per-channel running statistics updated by training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

struct AvgPoolBw {
    input: Var,
}

impl<S: Scalar> Backward<S> for AvgPoolBw {
    fn backward(&self, tape: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let s = tape.shape(self.input);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = S::lit(0.25);
        let g = grad.data();
        if let Some(gx) = sink.slot(self.input) {
            for plane in 0..nc {
                for y in 0..oh {
                    for x in 0..ow {
                        let u = g[(plane * oh + y) * ow + x] * quarter;
                        for dy in 0..2 {
                            let row = (plane * h + 2 * y + dy) * w + 2 * x;
                            gx[row] = gx[row] + u;
                            gx[row + 1] = gx[row + 1] + u;
                        }
                    }
                }
            }
        }
    }
}

struct MeanAxisBw {
    input: Var,
    outer: usize,
    len: usize,
    inner: usize,
}

impl<S: Scalar> Backward<S> for MeanAxisBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let inv = S::lit(1.0 / self.len as f64);
        let g = grad.data();
        if let Some(gx) = sink.slot(self.input) {
            for o in 0..self.outer {
                for a in 0..self.len {
                    for i in 0..self.inner {
                        let dst = (o * self.len + a) * self.inner + i;
                        gx[dst] = gx[dst] + g[o * self.inner + i] * inv;
                    }
                }
            }
        }
    }
}

/// Source frames feeding each output frame of [`Tape::align_time`].
#[derive(Debug, Clone, PartialEq, Eq)]
enum FrameSource {
    Copy(usize),
    Pair(usize, usize),
    Zero,
}

fn alignment_plan(src_len: usize, target: usize) -> Vec<FrameSource> {
    (0..target)
        .map(|t| {
            if src_len > target {
                let pooled = src_len / 2;
                if t < pooled {
                    FrameSource::Pair(2 * t, 2 * t + 1)
                } else {
                    FrameSource::Zero
                }
            } else if t < src_len {
                FrameSource::Copy(t)
            } else {
                FrameSource::Zero
            }
        })
        .collect()
}

struct AlignBw {
    input: Var,
    plan: Vec<FrameSource>,
    src_len: usize,
    width: usize,
}

impl<S: Scalar> Backward<S> for AlignBw {
    fn backward(&self, _: &Tape<S>, _: Var, grad: &Tensor<S>, sink: &mut GradSink<S>) {
        let (tgt, c) = (self.plan.len(), self.width);
        let batch = grad.numel() / (tgt * c);
        let half = S::lit(0.5);
        let g = grad.data();
        if let Some(gx) = sink.slot(self.input) {
            for b in 0..batch {
                for (t, src) in self.plan.iter().enumerate() {
                    let go = &g[(b * tgt + t) * c..][..c];
                    let mut add = |frame: usize, w: S| {
                        let dst = &mut gx[(b * self.src_len + frame) * c..][..c];
                        for (d, &u) in dst.iter_mut().zip(go) {
                            *d = *d + u * w;
                        }
                    };
                    match *src {
                        FrameSource::Copy(f) => add(f, S::one()),
                        FrameSource::Pair(f0, f1) => {
                            add(f0, half);
                            add(f1, half);
                        }
                        FrameSource::Zero => {}
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// 3x3 convolution, stride 1, zero padding 1: `[n,c,h,w] -> [n,c',h,w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return shape_err(format!(
                "conv2d expects [n,c,h,w] input and [c',c,3,3] kernel, got {xs:?} and {ks:?}"
            ));
        }
        if ks[1] != xs[1] {
            return shape_err(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[1], ks[1]
            ));
        }
        if bs != [ks[0]] {
            return shape_err(format!("conv2d bias {bs:?} does not match {} outputs", ks[0]));
        }
        let dims = ConvDims {
            n: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            h: xs[2],
            w: xs[3],
        };
        let hw = dims.h * dims.w;
        let k9 = dims.c_in * 9;
        let mut out = vec![S::zero(); dims.n * dims.c_out * hw];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let b = self.value(bias).data();
            let mut cols = vec![S::zero(); k9 * hw];
            for img in 0..dims.n {
                im2col(
                    &x[img * dims.c_in * hw..][..dims.c_in * hw],
                    dims.c_in,
                    dims.h,
                    dims.w,
                    &mut cols,
                );
                let o = &mut out[img * dims.c_out * hw..][..dims.c_out * hw];
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.fill(b[co]);
                }
                S::gemm(dims.c_out, k9, hw, S::one(), k, k9, 1, &cols, hw, 1, S::one(), o, hw, 1);
            }
        }
        let value = Tensor::new(vec![dims.n, dims.c_out, dims.h, dims.w], out)?;
        Ok(self.push(
            value,
            &[input, kernel, bias],
            Conv2dBw {
                input,
                kernel,
                bias,
                dims,
            },
        ))
    }

    /// Per-channel batch normalization of `[n,c,h,w]`.
    ///
    /// In training mode the batch statistics normalize the input and
    /// `running` is updated with momentum [`BN_MOMENTUM`]; otherwise `running`
    /// is used as-is.
    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, running: &mut RunningStats<S>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("batch_norm2d expects [n,c,h,w], got {xs:?}"));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batch_norm2d affine parameters must have {c} entries"));
        }
        if running.mean.len() != c || running.var.len() != c {
            return shape_err(format!("batch_norm2d running stats must have {c} entries"));
        }
        let count = n * hw;
        if count == 0 {
            return Err(Error::DegenerateStats("batch-by-spatial extent is zero".into()));
        }
        let x = self.value(input).data();
        let batch_stats = self.training;
        let (mean, var): (Vec<f64>, Vec<f64>) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for img in 0..n {
                    s += x[(img * c + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count as f64;
                let mut ss = 0.0;
                for img in 0..n {
                    ss += x[(img * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / count as f64;
            }
            (mean, var)
        } else {
            (
                running.mean.iter().map(|v| v.as_f64()).collect(),
                running.var.iter().map(|v| v.as_f64()).collect(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0f64; x.len()];
        let mut out = vec![S::zero(); x.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (gv, bv) = (g[ch].as_f64(), b[ch].as_f64());
                for p in 0..hw {
                    let xh = (x[base + p].as_f64() - mean[ch]) * inv_std[ch];
                    x_hat[base + p] = xh;
                    out[base + p] = S::lit(gv * xh + bv);
                }
            }
        }
        if batch_stats {
            let m = BN_MOMENTUM;
            for ch in 0..c {
                let unbiased = if count > 1 {
                    var[ch] * count as f64 / (count - 1) as f64
                } else {
                    var[ch]
                };
                running.mean[ch] = S::lit((1.0 - m) * running.mean[ch].as_f64() + m * mean[ch]);
                running.var[ch] = S::lit((1.0 - m) * running.var[ch].as_f64() + m * unbiased);
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            &[input, gamma, beta],
            BatchNormBw {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
                c,
                hw,
            },
        ))
    }

    /// 2x2 average pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return shape_err(format!("avg_pool2d needs [n,c,h>=2,w>=2], got {s:?}"));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let quarter = S::lit(0.25);
        let mut out = Vec::with_capacity(nc * oh * ow);
        for plane in 0..nc {
            for y in 0..oh {
                let r0 = (plane * h + 2 * y) * w;
                let r1 = r0 + w;
                for xo in 0..ow {
                    let i = 2 * xo;
                    out.push((x[r0 + i] + x[r0 + i + 1] + x[r1 + i] + x[r1 + i + 1]) * quarter);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, &[input], AvgPoolBw { input }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err(format!("mean_axis: axis {axis} invalid for {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![S::zero(); outer * inner];
        let inv = 1.0 / len as f64;
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for a in 0..len {
                    acc += x[(o * len + a) * inner + i].as_f64();
                }
                out[o * inner + i] = S::lit(acc * inv);
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[input],
            MeanAxisBw {
                input,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Aligns `[b, t', c]` to `[b, target, c]`.
    ///
    /// A longer source is mean-pooled pairwise along time and then truncated
    /// or zero-padded to `target`; a shorter source is zero-padded; equal
    /// lengths pass through unchanged.
    pub fn align_time(&mut self, input: Var, target: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return shape_err(format!("align_time expects [b,t,c], got {s:?}"));
        }
        let (batch, src_len, c) = (s[0], s[1], s[2]);
        if src_len == target {
            return Ok(input);
        }
        let plan = alignment_plan(src_len, target);
        let x = self.value(input).data();
        let half = S::lit(0.5);
        let mut out = vec![S::zero(); batch * target * c];
        for b in 0..batch {
            for (t, src) in plan.iter().enumerate() {
                let dst = &mut out[(b * target + t) * c..][..c];
                match *src {
                    FrameSource::Copy(f) => dst.copy_from_slice(&x[(b * src_len + f) * c..][..c]),
                    FrameSource::Pair(f0, f1) => {
                        let r0 = &x[(b * src_len + f0) * c..][..c];
                        let r1 = &x[(b * src_len + f1) * c..][..c];
                        for ((d, &p), &q) in dst.iter_mut().zip(r0).zip(r1) {
                            *d = (p + q) * half;
                        }
                    }
                    FrameSource::Zero => {}
                }
            }
        }
        let value = Tensor::new(vec![batch, target, c], out)?;
        Ok(self.push(
            value,
            &[input],
            AlignBw {
                input,
                plan,
                src_len,
                width: c,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_zero_input_zero_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::from_fn(&[3, 1, 3, 3], |i| i as f64 * 0.3 - 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.5).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &img));
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &delta));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &img[..]);
    }

    #[test]
    fn conv_all_ones_kernel_on_2x2() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::Shape(_))));
    }

    fn bn_fixture(tape: &mut Tape<f64>, x: Tensor<f64>, beta: f64) -> (Var, RunningStats<f64>) {
        let c = x.shape()[1];
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], 1.0));
        let b = tape.constant(Tensor::full(&[c], beta));
        let mut stats = RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        };
        let y = tape.batch_norm2d(xv, g, b, &mut stats).unwrap();
        (y, stats)
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let mut tape = Tape::<f64>::training(0);
        let (y, _) = bn_fixture(&mut tape, Tensor::full(&[2, 1, 3, 3], 4.2), 0.0);
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batch_norm_shift_by_beta() {
        let mut tape = Tape::<f64>::training(0);
        let x = Tensor::from_fn(&[2, 2, 2, 3], |i| ((i * 7) % 5) as f64 - 1.3);
        let (y, _) = bn_fixture(&mut tape, x, 5.0);
        let v = tape.value(y).data();
        for ch in 0..2 {
            let mean: f64 = (0..2).flat_map(|n| v[(n * 2 + ch) * 6..][..6].to_vec()).sum::<f64>() / 12.0;
            assert!((mean - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_two_values_map_to_unit() {
        let mut tape = Tape::<f64>::training(0);
        let (y, stats) = bn_fixture(&mut tape, t(&[2, 1, 1, 1], &[1.0, 3.0]), 0.0);
        let v = tape.value(y).data();
        // eps = 1e-5 keeps this just inside +-1
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
        // running mean 0.9*0 + 0.1*2; running var 0.9*1 + 0.1*2 (unbiased)
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::<f64>::new();
        let (y, stats) = bn_fixture(&mut tape, t(&[1, 1, 1, 2], &[1.0, 3.0]), 0.0);
        assert_eq!(stats.mean, vec![0.0]);
        let inv = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert_eq!(tape.value(y).data(), &[inv, 3.0 * inv]);
    }

    #[test]
    fn batch_norm_degenerate() {
        let mut tape = Tape::<f64>::training(0);
        let x = tape.constant(Tensor::zeros(&[0, 1, 2, 2]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats {
            mean: vec![0.0],
            var: vec![1.0],
        };
        assert!(matches!(
            tape.batch_norm2d(x, g, b, &mut stats),
            Err(Error::DegenerateStats(_))
        ));
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 6], 1.5));
        let y = tape.avg_pool2d(c).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));

        let odd = tape.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64));
        let y = tape.avg_pool2d(odd).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data()[0], (0.0 + 1.0 + 5.0 + 6.0) / 4.0);

        let thin = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(tape.avg_pool2d(thin).is_err());
    }

    #[test]
    fn align_time_rules() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 8, 2], |i| i as f64));
        let y = tape.align_time(x, 4).unwrap();
        // frame t averages source frames 2t and 2t+1
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0, 13.0, 14.0]);

        let same = tape.align_time(x, 8).unwrap();
        assert_eq!(same, x);

        let short = tape.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64 + 1.0));
        let y = tape.align_time(short, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);

        // 2T+1 source: last odd frame dropped by the pooling
        let odd = tape.constant(Tensor::full(&[1, 9, 1], 2.0));
        let y = tape.align_time(odd, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 4]);

        // 2T-1 source: pooled to T-1 frames, then one zero frame
        let under = tape.constant(Tensor::full(&[1, 7, 1], 2.0));
        let y = tape.align_time(under, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn mean_axis_reduces() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let y = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 8.0, 9.0]);
    }
}

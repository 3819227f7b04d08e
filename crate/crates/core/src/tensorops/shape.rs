//! Channel plumbing, reductions, normalization and spatial resizing.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::graph::{Backward, Graph, Var};
use super::Tensor4;

struct ConcatOp {
    channels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let [n, _, _, _] = output.shape();
        let plane = output.plane();
        let mut off = 0;
        let mut res = Vec::with_capacity(inputs.len());
        for (inp, &c) in inputs.iter().zip(&self.channels) {
            let mut g = Tensor4::zeros(inp.shape());
            for b in 0..n {
                let src = grad.index(b, off, 0, 0);
                let dst = g.index(b, 0, 0, 0);
                g.data_mut()[dst..dst + c * plane]
                    .copy_from_slice(&grad.data()[src..src + c * plane]);
            }
            off += c;
            res.push(Some(g));
        }
        res
    }
}

struct SliceOp {
    start: usize,
}

impl<T: Scalar> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = inputs[0];
        let [n, c, _, _] = output.shape();
        let plane = x.plane();
        let mut g = Tensor4::zeros(x.shape());
        for b in 0..n {
            let dst = g.index(b, self.start, 0, 0);
            let src = grad.index(b, 0, 0, 0);
            g.data_mut()[dst..dst + c * plane].copy_from_slice(&grad.data()[src..src + c * plane]);
        }
        vec![Some(g)]
    }
}

struct SumOp {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let g = grad.data()[0] * T::of(self.scale);
        vec![Some(Tensor4::full(inputs[0].shape(), g))]
    }
}

/// Softmax over a channel group: channels are viewed as `[k, s]` and each of
/// the `s` columns is normalized over its `k` entries.
struct SoftmaxOp {
    k: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let [n, c, _, _] = output.shape();
        let plane = output.plane();
        let s = c / self.k;
        let mut dx = Tensor4::zeros(output.shape());
        for b in 0..n {
            for j in 0..s {
                for p in 0..plane {
                    let idx = |i: usize| output.index(b, i * s + j, 0, 0) + p;
                    let dot: T = (0..self.k)
                        .map(|i| output.data()[idx(i)] * grad.data()[idx(i)])
                        .sum();
                    for i in 0..self.k {
                        let y = output.data()[idx(i)];
                        dx.data_mut()[idx(i)] = y * (grad.data()[idx(i)] - dot);
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Layer normalization across channels at every pixel, with per-channel
/// affine weight and bias.
struct ChannelNormOp<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for ChannelNormOp<T> {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [n, c, _, _] = x.shape();
        let plane = x.plane();
        let cf = T::of(c as f64);
        let mut dx = Tensor4::zeros(x.shape());
        let mut dgamma = Tensor4::zeros([1, c, 1, 1]);
        let mut dbeta = Tensor4::zeros([1, c, 1, 1]);
        let mut xhat = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); c];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| x.index(b, ch, 0, 0) + p;
                let mean = (0..c).map(|ch| x.data()[idx(ch)]).sum::<T>() / cf;
                let var = (0..c)
                    .map(|ch| {
                        let d = x.data()[idx(ch)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / cf;
                let rstd = T::one() / (var + self.eps).sqrt();
                for ch in 0..c {
                    xhat[ch] = (x.data()[idx(ch)] - mean) * rstd;
                    let g = grad.data()[idx(ch)];
                    dgamma.data_mut()[ch] += g * xhat[ch];
                    dbeta.data_mut()[ch] += g;
                    dxhat[ch] = g * gamma.data()[ch];
                }
                let m1 = dxhat.iter().copied().sum::<T>() / cf;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / cf;
                for ch in 0..c {
                    dx.data_mut()[idx(ch)] = rstd * (dxhat[ch] - m1 - xhat[ch] * m2);
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Resize by an integer factor, repeating each value.
struct NearestOp {
    factor: usize,
}

impl<T: Scalar> Backward<T> for NearestOp {
    fn name(&self) -> &'static str {
        "resize_nearest"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = inputs[0];
        let [n, c, _, w] = x.shape();
        let [_, _, ho, wo] = output.shape();
        let mut dx = Tensor4::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let gb = grad.index(b, ch, 0, 0);
                let xb = dx.index(b, ch, 0, 0);
                for y in 0..ho {
                    for xx in 0..wo {
                        let src = (y / self.factor) * w + xx / self.factor;
                        dx.data_mut()[xb + src] += grad.data()[gb + y * wo + xx];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Source position and weights of a half-pixel-centred linear resize.
fn linear_axis(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor4<T>, ho: usize, wo: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let ay = linear_axis(ho, h);
    let ax = linear_axis(wo, w);
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let xb = x.index(b, ch, 0, 0);
            let ob = out.index(b, ch, 0, 0);
            for (oy, &(y0, y1, fy)) in ay.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in ax.iter().enumerate() {
                    let fx = T::of(fx);
                    let v = |y: usize, xx: usize| x.data()[xb + y * w + xx];
                    let top = v(y0, x0) * (T::one() - fx) + v(y0, x1) * fx;
                    let bot = v(y1, x0) * (T::one() - fx) + v(y1, x1) * fx;
                    out.data_mut()[ob + oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    out
}

struct BilinearResizeOp;

impl<T: Scalar> Backward<T> for BilinearResizeOp {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = inputs[0];
        let [n, c, h, w] = x.shape();
        let [_, _, ho, wo] = output.shape();
        let ay = linear_axis(ho, h);
        let ax = linear_axis(wo, w);
        let mut dx = Tensor4::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let xb = dx.index(b, ch, 0, 0);
                let gb = grad.index(b, ch, 0, 0);
                for (oy, &(y0, y1, fy)) in ay.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in ax.iter().enumerate() {
                        let fx = T::of(fx);
                        let g = grad.data()[gb + oy * wo + ox];
                        let d = dx.data_mut();
                        d[xb + y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                        d[xb + y0 * w + x1] += g * (T::one() - fy) * fx;
                        d[xb + y1 * w + x0] += g * fy * (T::one() - fx);
                        d[xb + y1 * w + x1] += g * fy * fx;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenate along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, _, h, w] = self.shape(first);
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err!(
                    "concat {:?} with {:?}",
                    self.shape(v),
                    self.shape(first)
                ));
            }
            channels.push(vc);
        }
        let ctot: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Tensor4::zeros([n, ctot, h, w]);
        for b in 0..n {
            let mut off = 0;
            for (&v, &c) in xs.iter().zip(&channels) {
                let t = self.value(v);
                let src = t.index(b, 0, 0, 0);
                let dst = out.index(b, off, 0, 0);
                out.data_mut()[dst..dst + c * plane]
                    .copy_from_slice(&t.data()[src..src + c * plane]);
                off += c;
            }
        }
        Ok(self.record(xs, out, ConcatOp { channels }))
    }

    /// Channels `start .. start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c {
            return Err(shape_err!("slice {}..{} of {} channels", start, start + len, c));
        }
        let t = self.value(x);
        let plane = h * w;
        let mut out = Tensor4::zeros([n, len, h, w]);
        for b in 0..n {
            let src = t.index(b, start, 0, 0);
            let dst = out.index(b, 0, 0, 0);
            out.data_mut()[dst..dst + len * plane].copy_from_slice(&t.data()[src..src + len * plane]);
        }
        Ok(self.record(&[x], out, SliceOp { start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(&[x], Tensor4::scalar(s), SumOp { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len() as f64;
        let s = t.sum() / T::of(n);
        self.record(&[x], Tensor4::scalar(s), SumOp { scale: 1.0 / n })
    }

    /// Softmax over `k` channel groups of stride `c / k`.
    pub fn softmax_channels(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, _, _] = self.shape(x);
        if k == 0 || c % k != 0 {
            return Err(shape_err!("softmax over {} groups of {} channels", k, c));
        }
        let t = self.value(x);
        let s = c / k;
        let plane = t.plane();
        let mut out = Tensor4::zeros(t.shape());
        for b in 0..n {
            for j in 0..s {
                for p in 0..plane {
                    let idx = |i: usize| t.index(b, i * s + j, 0, 0) + p;
                    let m = (0..k).map(|i| t.data()[idx(i)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for i in 0..k {
                        let e = (t.data()[idx(i)] - m).exp();
                        out.data_mut()[idx(i)] = e;
                        z += e;
                    }
                    for i in 0..k {
                        out.data_mut()[idx(i)] /= z;
                    }
                }
            }
        }
        Ok(self.record(&[x], out, SoftmaxOp { k }))
    }

    /// Per-pixel normalization over channels; `gamma`, `beta` are `[1, c, 1, 1]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [n, c, _, _] = self.shape(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!("channel_norm affine params do not match {} channels", c));
        }
        let eps = T::of(1e-6);
        let t = self.value(x);
        let (gm, bt) = (self.value(gamma), self.value(beta));
        let plane = t.plane();
        let cf = T::of(c as f64);
        let mut out = Tensor4::zeros(t.shape());
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| t.index(b, ch, 0, 0) + p;
                let mean = (0..c).map(|ch| t.data()[idx(ch)]).sum::<T>() / cf;
                let var = (0..c)
                    .map(|ch| {
                        let d = t.data()[idx(ch)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / cf;
                let rstd = T::one() / (var + eps).sqrt();
                for ch in 0..c {
                    out.data_mut()[idx(ch)] =
                        (t.data()[idx(ch)] - mean) * rstd * gm.data()[ch] + bt.data()[ch];
                }
            }
        }
        Ok(self.record(&[x, gamma, beta], out, ChannelNormOp { eps }))
    }

    pub fn resize_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(shape_err!("resize factor must be >= 1"));
        }
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let (ho, wo) = (h * factor, w * factor);
        let out = Tensor4::from_fn([n, c, ho, wo], |[b, ch, y, xx]| {
            t.at(b, ch, y / factor, xx / factor)
        });
        Ok(self.record(&[x], out, NearestOp { factor }))
    }

    /// Half-pixel-centred bilinear resize to `ho x wo`.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        if ho == 0 || wo == 0 {
            return Err(shape_err!("resize to empty extent {}x{}", ho, wo));
        }
        let out = resize_bilinear_forward(self.value(x), ho, wo);
        Ok(self.record(&[x], out, BilinearResizeOp))
    }
}

//! 2-D convolution (dense and grouped) with exact gradients.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::graph::{Backward, Graph, Var};
use super::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvCfg {
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cfg: ConvCfg,
}

impl Geom {
    fn new(x: [usize; 4], k: [usize; 4], cfg: ConvCfg) -> Result<Self> {
        let [n, cin, h, w] = x;
        let [cout, cin_g, kh, kw] = k;
        if cfg.stride == 0 {
            return Err(shape_err!("conv2d stride must be >= 1"));
        }
        if cfg.groups == 0 || cin % cfg.groups != 0 || cout % cfg.groups != 0 {
            return Err(shape_err!(
                "conv2d groups {} incompatible with {} -> {} channels",
                cfg.groups,
                cin,
                cout
            ));
        }
        if cin_g * cfg.groups != cin {
            return Err(shape_err!(
                "conv2d kernel expects {} input channels, input has {}",
                cin_g * cfg.groups,
                cin
            ));
        }
        if h + 2 * cfg.padding < kh || w + 2 * cfg.padding < kw {
            return Err(shape_err!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * cfg.padding,
                w + 2 * cfg.padding
            ));
        }
        let ho = (h + 2 * cfg.padding - kh) / cfg.stride + 1;
        let wo = (w + 2 * cfg.padding - kw) / cfg.stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            cfg,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }

    fn macs(&self) -> u64 {
        (self.n * self.cout * self.ho * self.wo * (self.cin / self.cfg.groups) * self.kh * self.kw)
            as u64
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.cfg.stride + k) as isize - self.cfg.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col<T: Scalar>(g: &Geom, x: &[T], col: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let sy = g.src(oy, ky, g.h);
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] = match (sy, g.src(ox, kx, g.w)) {
                            (Some(y), Some(xx)) => plane[y * g.w + xx],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geom, col: &[T], dx: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(y) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(xx) = g.src(ox, kx, g.w) {
                            plane[y * g.w + xx] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Scalar>(g: &Geom, x: &Tensor4<T>, k: &Tensor4<T>, out: &mut Tensor4<T>) {
    let p = g.ho * g.wo;
    let kk = g.cin * g.kh * g.kw;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for n in 0..g.n {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        T::gemm(
            g.cout, kk, p, T::one(), k.data(), kk as isize, 1, b, p as isize, 1, T::one(), dst,
            p as isize, 1,
        );
    }
}

fn grouped_forward<T: Scalar>(g: &Geom, x: &Tensor4<T>, k: &Tensor4<T>, out: &mut Tensor4<T>) {
    let cin_g = g.cin / g.cfg.groups;
    let cout_g = g.cout / g.cfg.groups;
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k.at(co, ci_l, ky, kx);
                        for oy in 0..g.ho {
                            let Some(y) = g.src(oy, ky, g.h) else { continue };
                            let orow = out.index(n, co, oy, 0);
                            let irow = x.index(n, ci, y, 0);
                            for ox in 0..g.wo {
                                if let Some(xx) = g.src(ox, kx, g.w) {
                                    let v = x.data()[irow + xx];
                                    out.data_mut()[orow + ox] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: Geom,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let g = &self.geom;
        let (x, k) = (inputs[0], inputs[1]);
        let mut dx = Tensor4::zeros(x.shape());
        let mut dk = Tensor4::zeros(k.shape());
        let p = g.ho * g.wo;
        if g.cfg.groups == 1 {
            let kk = g.cin * g.kh * g.kw;
            let in_per = g.cin * g.h * g.w;
            let out_per = g.cout * p;
            let mut col = vec![T::zero(); kk * p];
            let mut dcol = vec![T::zero(); kk * p];
            for n in 0..g.n {
                let xs = &x.data()[n * in_per..(n + 1) * in_per];
                let gs = &grad.data()[n * out_per..(n + 1) * out_per];
                if g.is_pointwise() {
                    col.copy_from_slice(xs);
                } else {
                    im2col(g, xs, &mut col);
                }
                // dK += G (cout x p) * col^T (p x kk)
                T::gemm(
                    g.cout, p, kk, T::one(), gs, p as isize, 1, &col, 1, p as isize, T::one(),
                    dk.data_mut(), kk as isize, 1,
                );
                // dcol = K^T (kk x cout) * G (cout x p)
                T::gemm(
                    kk, g.cout, p, T::one(), k.data(), 1, kk as isize, gs, p as isize, 1,
                    T::zero(), &mut dcol, p as isize, 1,
                );
                let dxs = &mut dx.data_mut()[n * in_per..(n + 1) * in_per];
                if g.is_pointwise() {
                    for (d, &s) in dxs.iter_mut().zip(&dcol) {
                        *d += s;
                    }
                } else {
                    col2im(g, &dcol, dxs);
                }
            }
        } else {
            let cin_g = g.cin / g.cfg.groups;
            let cout_g = g.cout / g.cfg.groups;
            for n in 0..g.n {
                for co in 0..g.cout {
                    let grp = co / cout_g;
                    for ci_l in 0..cin_g {
                        let ci = grp * cin_g + ci_l;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let wv = k.at(co, ci_l, ky, kx);
                                let mut acc = T::zero();
                                for oy in 0..g.ho {
                                    let Some(y) = g.src(oy, ky, g.h) else { continue };
                                    let orow = grad.index(n, co, oy, 0);
                                    let irow = x.index(n, ci, y, 0);
                                    for ox in 0..g.wo {
                                        if let Some(xx) = g.src(ox, kx, g.w) {
                                            let go = grad.data()[orow + ox];
                                            acc += go * x.data()[irow + xx];
                                            dx.data_mut()[irow + xx] += go * wv;
                                        }
                                    }
                                }
                                let i = dk.index(co, ci_l, ky, kx);
                                dk.data_mut()[i] += acc;
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![Some(dx), Some(dk)];
        if self.has_bias {
            let mut db = Tensor4::zeros([1, g.cout, 1, 1]);
            for n in 0..g.n {
                for c in 0..g.cout {
                    let s = n * g.cout * p + c * p;
                    db.data_mut()[c] += grad.data()[s..s + p].iter().copied().sum::<T>();
                }
            }
            out.push(Some(db));
        }
        out
    }
}

/// Plain convolution forward, shared by the graph op and by tests.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    k: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    cfg: ConvCfg,
) -> Result<Tensor4<T>> {
    let g = Geom::new(x.shape(), k.shape(), cfg)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(shape_err!("conv2d bias has {} entries, expected {}", b.len(), g.cout));
        }
    }
    let mut out = Tensor4::zeros([g.n, g.cout, g.ho, g.wo]);
    if let Some(b) = bias {
        let p = g.ho * g.wo;
        for n in 0..g.n {
            for c in 0..g.cout {
                let s = (n * g.cout + c) * p;
                out.data_mut()[s..s + p].fill(b.data()[c]);
            }
        }
    }
    if cfg.groups == 1 {
        dense_forward(&g, x, k, &mut out);
    } else {
        grouped_forward(&g, x, k, &mut out);
    }
    Ok(out)
}

impl<T: Scalar> Graph<T> {
    /// `kernel` is `[cout, cin / groups, kh, kw]`, `bias` is `[1, cout, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, cfg: ConvCfg) -> Result<Var> {
        let geom = Geom::new(self.shape(x), self.shape(kernel), cfg)?;
        let out = conv2d_forward(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            cfg,
        )?;
        self.add_macs(geom.macs());
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.record(
            &inputs,
            out,
            Conv2dOp {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }
}

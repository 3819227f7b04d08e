use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Backward, Graph, Var};
use super::Tensor4;

/// Block-mean pooling by `factor`. Extents that are not divisible are
/// replicate-padded on the right and bottom edge first.
pub fn avg_pool_forward<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor < 1 {
        return Err(Error::InvalidArgument("avg_pool factor must be >= 1".into()));
    }
    let [n, c, h, w] = x.shape();
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
    let inv = T::one() / T::of((factor * factor) as f64);
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[x.index(b, ch, 0, 0)..][..h * w];
            let base = out.index(b, ch, 0, 0);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        let y = (oy * factor + dy).min(h - 1);
                        for dx in 0..factor {
                            let xx = (ox * factor + dx).min(w - 1);
                            acc += src[y * w + xx];
                        }
                    }
                    out.data_mut()[base + oy * wo + ox] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

struct AvgPoolOp {
    factor: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let f = self.factor;
        let [n, c, h, w] = inputs[0].shape();
        let [_, _, ho, wo] = output.shape();
        let inv = T::one() / T::of((f * f) as f64);
        let mut dx = Tensor4::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let gbase = grad.index(b, ch, 0, 0);
                let xbase = dx.index(b, ch, 0, 0);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = grad.data()[gbase + oy * wo + ox] * inv;
                        for dy in 0..f {
                            let y = (oy * f + dy).min(h - 1);
                            for ddx in 0..f {
                                let xx = (ox * f + ddx).min(w - 1);
                                dx.data_mut()[xbase + y * w + xx] += gv;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = avg_pool_forward(self.value(x), factor)?;
        Ok(self.record(&[x], out, AvgPoolOp { factor }))
    }
}

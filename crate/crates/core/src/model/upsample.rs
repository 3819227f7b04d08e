use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensorops::{Backward, Graph, Tensor4, Var};

/// Neighbour offsets in mask order: `k = (dy + 1) * 3 + (dx + 1)`.
const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

struct ConvexUpsampleOp {
    factor: usize,
}

#[inline]
fn clamp_idx(v: usize, d: isize, n: usize) -> usize {
    (v as isize + d).clamp(0, n as isize - 1) as usize
}

impl<T: Scalar> Backward<T> for ConvexUpsampleOp {
    fn name(&self) -> &'static str {
        "convex_upsample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let [n, c, h, wd] = x.shape();
        let f = self.factor;
        let ff = f * f;
        let mut gx = Tensor4::zeros(x.shape());
        let mut gw = Tensor4::zeros(w.shape());
        for b in 0..n {
            for y in 0..h {
                for xx in 0..wd {
                    for s in 0..ff {
                        let (fy, fx) = (s / f, s % f);
                        for (k, &(dy, dx)) in OFFSETS.iter().enumerate() {
                            let (ny, nx) = (clamp_idx(y, dy, h), clamp_idx(xx, dx, wd));
                            let wi = w.index(b, k * ff + s, y, xx);
                            let wk = w.data()[wi];
                            let mut acc = T::zero();
                            for ch in 0..c {
                                let go = grad.at(b, ch, y * f + fy, xx * f + fx);
                                acc += go * x.at(b, ch, ny, nx);
                                let xi = gx.index(b, ch, ny, nx);
                                gx.data_mut()[xi] += wk * go;
                            }
                            gw.data_mut()[wi] += acc;
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gw)]
    }
}

/// Each fine pixel is the `weights`-weighted sum of the 3x3 coarse
/// neighbourhood around its parent, with replicated borders.
///
/// `x` is `[n, c, h, w]`; `weights` is `[n, 9 * f * f, h, w]` with channel
/// `k * f * f + fy * f + fx`. Output is `[n, c, h * f, w * f]`; no rescaling
/// of values is applied.
pub fn convex_upsample<T: Scalar>(g: &mut Graph<T>, x: Var, weights: Var, factor: usize) -> Result<Var> {
    let [n, c, h, w] = g.shape(x);
    let ff = factor * factor;
    if factor == 0 || g.shape(weights) != [n, 9 * ff, h, w] {
        return Err(shape_err!(
            "convex upsample of {:?} by {} needs weights [{n}, {}, {h}, {w}], got {:?}",
            g.shape(x),
            factor,
            9 * ff,
            g.shape(weights)
        ));
    }
    let (xv, wv) = (g.value(x), g.value(weights));
    let mut out = Tensor4::zeros([n, c, h * factor, w * factor]);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for s in 0..ff {
                    let (fy, fx) = (s / factor, s % factor);
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for (k, &(dy, dx)) in OFFSETS.iter().enumerate() {
                            acc += wv.at(b, k * ff + s, y, xx)
                                * xv.at(b, ch, clamp_idx(y, dy, h), clamp_idx(xx, dx, w));
                        }
                        out.set(b, ch, y * factor + fy, xx * factor + fx, acc);
                    }
                }
            }
        }
    }
    g.add_macs((n * c * h * w * ff * 9) as u64);
    Ok(g.record(&[x, weights], out, ConvexUpsampleOp { factor }))
}

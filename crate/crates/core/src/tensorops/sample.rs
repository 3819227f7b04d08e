//! Bilinear sampling with zero padding outside the map.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::graph::{Backward, Graph, Var};
use super::Tensor4;

/// Four-tap bilinear stencil at a real-valued location.
#[derive(Clone, Copy, Debug)]
pub struct Taps<T> {
    pub x0: isize,
    pub y0: isize,
    pub fx: T,
    pub fy: T,
}

impl<T: Scalar> Taps<T> {
    #[inline]
    pub fn at(x: T, y: T) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        Self {
            x0: xf.to_isize().unwrap_or(isize::MIN / 2),
            y0: yf.to_isize().unwrap_or(isize::MIN / 2),
            fx: x - xf,
            fy: y - yf,
        }
    }

    /// Read `plane` (row-major `h x w`) at `(y, x)`; zero when outside.
    #[inline]
    pub fn fetch(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    }

    #[inline]
    pub fn corners(&self, plane: &[T], h: usize, w: usize) -> [T; 4] {
        [
            Self::fetch(plane, h, w, self.y0, self.x0),
            Self::fetch(plane, h, w, self.y0, self.x0 + 1),
            Self::fetch(plane, h, w, self.y0 + 1, self.x0),
            Self::fetch(plane, h, w, self.y0 + 1, self.x0 + 1),
        ]
    }

    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    #[inline]
    pub fn sample(&self, plane: &[T], h: usize, w: usize) -> T {
        let v = self.corners(plane, h, w);
        let wt = self.weights();
        v[0] * wt[0] + v[1] * wt[1] + v[2] * wt[2] + v[3] * wt[3]
    }

    /// Partial derivatives of the sample w.r.t. `(x, y)`.
    #[inline]
    pub fn slopes(&self, plane: &[T], h: usize, w: usize) -> (T, T) {
        let [v00, v01, v10, v11] = self.corners(plane, h, w);
        let one = T::one();
        let dx = (one - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        let dy = (one - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        (dx, dy)
    }

    /// Scatter `g` into `plane` with the bilinear weights.
    #[inline]
    pub fn scatter(&self, plane: &mut [T], h: usize, w: usize, g: T) {
        let wt = self.weights();
        let offs = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for (k, (dy, dx)) in offs.into_iter().enumerate() {
            let (y, x) = (self.y0 + dy, self.x0 + dx);
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                plane[y as usize * w + x as usize] += g * wt[k];
            }
        }
    }
}

/// `map` is `[n, c, h, w]`; `coords` is `[n, 2, ho, wo]` holding `(x, y)`
/// pixel positions. Output is `[n, c, ho, wo]`.
pub fn bilinear_sample_forward<T: Scalar>(
    map: &Tensor4<T>,
    coords: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = map.shape();
    let [cn, two, ho, wo] = coords.shape();
    if cn != n || two != 2 {
        return Err(shape_err!(
            "bilinear_sample coords {:?} incompatible with map {:?}",
            coords.shape(),
            map.shape()
        ));
    }
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    let p = ho * wo;
    for b in 0..n {
        let cx = &coords.data()[coords.index(b, 0, 0, 0)..][..p];
        let cy = &coords.data()[coords.index(b, 1, 0, 0)..][..p];
        let taps: Vec<Taps<T>> = cx.iter().zip(cy).map(|(&x, &y)| Taps::at(x, y)).collect();
        for ch in 0..c {
            let plane = &map.data()[map.index(b, ch, 0, 0)..][..h * w];
            let ob = out.index(b, ch, 0, 0);
            for (i, t) in taps.iter().enumerate() {
                out.data_mut()[ob + i] = t.sample(plane, h, w);
            }
        }
    }
    Ok(out)
}

struct BilinearOp;

impl<T: Scalar> Backward<T> for BilinearOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let (map, coords) = (inputs[0], inputs[1]);
        let [n, c, h, w] = map.shape();
        let [_, _, ho, wo] = coords.shape();
        let p = ho * wo;
        let mut dmap = Tensor4::zeros(map.shape());
        let mut dcoords = Tensor4::zeros(coords.shape());
        for b in 0..n {
            let cxo = coords.index(b, 0, 0, 0);
            let cyo = coords.index(b, 1, 0, 0);
            let taps: Vec<Taps<T>> = (0..p)
                .map(|i| Taps::at(coords.data()[cxo + i], coords.data()[cyo + i]))
                .collect();
            for ch in 0..c {
                let mo = map.index(b, ch, 0, 0);
                let go = grad.index(b, ch, 0, 0);
                for (i, t) in taps.iter().enumerate() {
                    let gv = grad.data()[go + i];
                    let (sx, sy) = t.slopes(&map.data()[mo..mo + h * w], h, w);
                    dcoords.data_mut()[cxo + i] += gv * sx;
                    dcoords.data_mut()[cyo + i] += gv * sy;
                    t.scatter(&mut dmap.data_mut()[mo..mo + h * w], h, w, gv);
                }
            }
        }
        vec![Some(dmap), Some(dcoords)]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let out = bilinear_sample_forward(self.value(map), self.value(coords))?;
        Ok(self.record(&[map, coords], out, BilinearOp))
    }
}

//! Dense flow fields and their per-pixel mixture parameters.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensorops::{resize_bilinear_forward, Tensor4};

/// Per-pixel `(u, v)` motion with a validity mask.
///
/// Vectors are stored as a `[1, 2, h, w]` tensor so they can enter a graph
/// without reshuffling.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    vectors: Tensor4<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            vectors: Tensor4::zeros([1, 2, height, width]),
            valid: vec![true; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: T, v: T) -> Self {
        Self::from_fn(height, width, |_, _| ([u, v], true))
    }

    /// Build from a per-pixel closure returning `([u, v], valid)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> ([T; 2], bool)) -> Self {
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (uv, ok) = f(y, x);
                out.set(y, x, uv);
                out.valid[y * width + x] = ok;
            }
        }
        out
    }

    /// Wrap a `[1, 2, h, w]` tensor; every pixel valid.
    pub fn from_tensor(t: Tensor4<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 2 {
            return Err(shape_err!("flow tensor must be [1, 2, h, w], got {:?}", t.shape()));
        }
        Ok(Self {
            vectors: t,
            valid: vec![true; h * w],
        })
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.valid.len() {
            return Err(shape_err!(
                "mask of {} entries for {} pixels",
                valid.len(),
                self.valid.len()
            ));
        }
        self.valid = valid;
        Ok(self)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.vectors.shape()[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.vectors.shape()[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [T; 2] {
        [self.vectors.at(0, 0, y, x), self.vectors.at(0, 1, y, x)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, uv: [T; 2]) {
        self.vectors.set(0, 0, y, x, uv[0]);
        self.vectors.set(0, 1, y, x, uv[1]);
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width() + x]
    }

    pub fn set_valid(&mut self, y: usize, x: usize, ok: bool) {
        let w = self.width();
        self.valid[y * w + x] = ok;
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn tensor(&self) -> &Tensor4<T> {
        &self.vectors
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.vectors
    }

    pub fn into_tensor(self) -> Tensor4<T> {
        self.vectors
    }

    /// `u` plane then `v` plane, row-major.
    pub fn u_plane(&self) -> &[T] {
        &self.vectors.data()[..self.len()]
    }

    pub fn v_plane(&self) -> &[T] {
        &self.vectors.data()[self.len()..]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.valid[i])
            .map(|i| {
                let (u, v) = (self.u_plane()[i].f64(), self.v_plane()[i].f64());
                (u * u + v * v).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            vectors: self.vectors.cast(),
            valid: self.valid.clone(),
        }
    }

    /// Bilinear resize to `height x width`; vectors are rescaled by the
    /// per-axis size ratio. The mask is resampled by nearest lookup.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let (sy, sx) = (
            height as f64 / self.height() as f64,
            width as f64 / self.width() as f64,
        );
        let mut t = resize_bilinear_forward(&self.vectors, height, width);
        let plane = height * width;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= T::of(if i < plane { sx } else { sy });
        }
        let valid = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| {
                let yy = ((y as f64 + 0.5) / sy - 0.5).round().clamp(0.0, (self.height() - 1) as f64);
                let xx = ((x as f64 + 0.5) / sx - 0.5).round().clamp(0.0, (self.width() - 1) as f64);
                self.is_valid(yy as usize, xx as usize)
            })
            .collect();
        Self { vectors: t, valid }
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| (self.get(y, x), self.is_valid(y, x)))
    }
}

/// Per-pixel mixture parameters: weight `alpha` of the unit-scale component
/// and log-scale `beta2` of the wide component.
#[derive(Clone, Debug, PartialEq)]
pub struct MoLParams<T> {
    pub alpha: Tensor4<T>,
    pub beta2: Tensor4<T>,
}

impl<T: Scalar> MoLParams<T> {
    /// Fully confident: `alpha = 1`, `beta2 = 0`.
    pub fn confident(height: usize, width: usize) -> Self {
        Self {
            alpha: Tensor4::full([1, 1, height, width], T::one()),
            beta2: Tensor4::zeros([1, 1, height, width]),
        }
    }

    pub fn uniform(height: usize, width: usize, alpha: T, beta2: T) -> Self {
        Self {
            alpha: Tensor4::full([1, 1, height, width], alpha),
            beta2: Tensor4::full([1, 1, height, width], beta2),
        }
    }

    pub fn height(&self) -> usize {
        self.alpha.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.alpha.shape()[3]
    }

    pub fn mean_beta2(&self) -> f64 {
        self.beta2.data().iter().map(|v| v.f64()).sum::<f64>() / self.beta2.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_scales_vectors() {
        let f = FlowField::<f64>::constant(4, 4, 1.0, -0.5);
        let up = f.resize(8, 12);
        assert_eq!(up.get(3, 7), [3.0, -1.0]);
        assert_eq!(up.n_valid(), 96);
    }

    #[test]
    fn mask_length_checked() {
        let f = FlowField::<f32>::zeros(2, 2);
        assert!(f.with_valid(vec![true; 3]).is_err());
    }
}

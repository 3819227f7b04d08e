use std::io::{Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense 4-D tensor laid out batch, channel, row, col (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "tensor {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Number of elements in one (batch, channel) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|d| *d = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch element `n` as a single-batch tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.len() / self.shape[0].max(1);
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack single-batch tensors of identical shape along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Write the golden-file dump: four little-endian `i32` extents followed
    /// by little-endian `f32` data.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for &e in &self.shape {
            w.write_all(&(e as i32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v.f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut b4 = [0u8; 4];
        let mut shape = [0usize; 4];
        for s in &mut shape {
            r.read_exact(&mut b4)?;
            let e = i32::from_le_bytes(b4);
            if e < 0 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "negative tensor extent",
                ));
            }
            *s = e as usize;
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_dump(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_dump(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_dump(std::io::BufReader::new(f)).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::InvalidData => Error::Corrupt {
                path: path.into(),
                reason: e.to_string(),
            },
            _ => Error::io(path, e),
        })
    }
}

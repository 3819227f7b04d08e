//! `.flo` interchange, binary PPM images and the flow color wheel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::flow::FlowField;
use crate::scalar::Scalar;
use crate::tensorops::Tensor4;

pub const FLO_MAGIC: f32 = 202021.25;
/// Component value written for masked pixels; anything at or beyond it reads
/// back as invalid.
pub const FLO_INVALID: f32 = 1e9;

/// Interleaved RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[1, 3, h, w]` copy.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_fn([1, 3, self.height, self.width], |[_, c, y, x]| {
            T::of(self.data[(y * self.width + x) * 3 + c] as f64)
        })
    }

    /// Batch item 0 of a `[n, 3, h, w]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 3 {
            return Err(shape_err!("image tensor needs 3 channels, got {c}"));
        }
        Ok(Self::from_fn(h, w, |y, x| {
            [0, 1, 2].map(|c| t.at(0, c, y, x).f64() as f32)
        }))
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| self.get(y, x))
    }

    /// Grow to `height x width` by repeating the last row and column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            self.get(y.min(self.height - 1), x.min(self.width - 1))
        })
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let t = crate::tensorops::resize_bilinear_forward(&self.to_tensor::<f64>(), height, width);
        Self::from_tensor(&t).expect("three channels")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(shape_err!("{} bytes for a {height}x{width} RGB image", bytes.len()));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn encode_flo<T: Scalar>(field: &FlowField<T>) -> Vec<u8> {
    let (h, w) = (field.height(), field.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let uv = if field.is_valid(y, x) {
                field.get(y, x).map(|v| v.f64() as f32)
            } else {
                [FLO_INVALID; 2]
            };
            out.extend_from_slice(&uv[0].to_le_bytes());
            out.extend_from_slice(&uv[1].to_le_bytes());
        }
    }
    out
}

pub fn decode_flo<T: Scalar>(bytes: &[u8], path: &Path) -> Result<FlowField<T>> {
    let format = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).expect("4 bytes");
    let magic = f32::from_le_bytes(word(0));
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(format(format!("magic {magic} != {FLO_MAGIC}")));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w < 0 || h < 0 {
        return Err(format(format!("negative extents {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let want = 12 + 8 * w * h;
    if bytes.len() != want {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("{} bytes, expected {want} for {w}x{h}", bytes.len()),
        });
    }
    Ok(FlowField::from_fn(h, w, |y, x| {
        let i = 12 + 8 * (y * w + x);
        let (u, v) = (f32::from_le_bytes(word(i)), f32::from_le_bytes(word(i + 4)));
        if u.abs() >= FLO_INVALID || v.abs() >= FLO_INVALID || !u.is_finite() || !v.is_finite() {
            ([T::zero(); 2], false)
        } else {
            ([T::of(u as f64), T::of(v as f64)], true)
        }
    }))
}

pub fn write_flo<T: Scalar>(field: &FlowField<T>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_flo(field))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_flo<T: Scalar>(path: &Path) -> Result<FlowField<T>> {
    decode_flo(&open(path)?, path)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)
        .and_then(|_| w.write_all(&img.to_bytes()))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PPM (`P6`, maxval 255); `#` comments in the header are skipped.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = open(path)?;
    let format = |reason: &str| Error::Format {
        path: path.into(),
        reason: reason.into(),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(format("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format("only maxval 255 is supported"));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * 3 {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("{} raster bytes, expected {}", raster.len(), w * h * 3),
        });
    }
    Image::from_bytes(h, w, raster)
}

/// Middlebury color wheel: 55 RGB stops in `[0, 1]`.
fn color_wheel() -> Vec<[f32; 3]> {
    const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
    let mut wheel = Vec::with_capacity(55);
    for (s, &n) in SEGMENTS.iter().enumerate() {
        for i in 0..n {
            let up = i as f32 / n as f32;
            let down = 1.0 - up;
            wheel.push(match s {
                0 => [1.0, up, 0.0],
                1 => [down, 1.0, 0.0],
                2 => [0.0, 1.0, up],
                3 => [0.0, down, 1.0],
                4 => [up, 0.0, 1.0],
                _ => [1.0, 0.0, down],
            });
        }
    }
    wheel
}

/// Fractional wheel position of direction `(u, v)`, in `[0, 54]`.
fn wheel_position(u: f64, v: f64) -> f64 {
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    (a + 1.0) / 2.0 * 54.0
}

/// Direction as hue, magnitude relative to `max_norm` as saturation;
/// invalid pixels are black. `max_norm` defaults to the field's largest
/// valid magnitude.
pub fn flow_to_color<T: Scalar>(field: &FlowField<T>, max_norm: Option<f64>) -> Image {
    let wheel = color_wheel();
    let max_norm = max_norm.unwrap_or_else(|| field.max_magnitude());
    Image::from_fn(field.height(), field.width(), |y, x| {
        if !field.is_valid(y, x) {
            return [0.0; 3];
        }
        let [u, v] = field.get(y, x).map(|c| c.f64());
        let mag = (u * u + v * v).sqrt();
        let rad = if max_norm > 0.0 { (mag / max_norm).min(1.0) } else { 0.0 };
        let fk = wheel_position(u, v);
        let k0 = fk.floor() as usize;
        let k1 = (k0 + 1) % wheel.len();
        let f = (fk - k0 as f64) as f32;
        let rad = rad as f32;
        [0, 1, 2].map(|c| {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            1.0 - rad * (1.0 - col)
        })
    })
}

/// Grayscale-to-red ramp of per-pixel error, saturating at `max_err`;
/// invalid pixels are black.
pub fn error_to_color(errors: &[Option<f64>], height: usize, width: usize, max_err: f64) -> Image {
    Image::from_fn(height, width, |y, x| match errors[y * width + x] {
        None => [0.0; 3],
        Some(e) => {
            let t = (e / max_err).clamp(0.0, 1.0) as f32;
            [1.0, 1.0 - t, 1.0 - t]
        }
    })
}

//! Synthetic training pairs with exact ground truth.
//!
//! Pixel `(x, y)` has its centre at image coordinates `(x, y)`. A flow vector
//! at `p` points from `p` in frame 1 to its correspondence in frame 2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::flowio::Image;

/// Occlusion threshold on relative depth.
const OCCLUSION_EPS: f64 = 0.01;
const INVERT_ITERS: usize = 40;
const INVERT_TOL: f64 = 1e-4;
/// Preimages this far outside frame 1 still show the frame-1 texture, so
/// bilinear lookups next to the border stay consistent.
const SEEN_MARGIN: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Rigid,
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub mode: DataMode,
    pub height: usize,
    pub width: usize,
    /// Multiplier on the sampled camera motion; 0 gives the identity pose.
    pub motion_scale: f64,
    /// Cap on rigid flow magnitude as a fraction of the larger extent.
    pub max_flow_fraction: f64,
    pub depth_range: [f64; 2],
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Affine pairs: cap on flow magnitude in pixels.
    pub max_disp: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: DataMode::Affine,
            height: 64,
            width: 64,
            motion_scale: 1.0,
            max_flow_fraction: 0.125,
            depth_range: [2.0, 20.0],
            max_translation: 0.5,
            max_rotation_deg: 10.0,
            max_disp: 8.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data.{m}")));
        if self.height == 0 || self.width == 0 {
            return bad("height and width must be positive");
        }
        if !(self.motion_scale >= 0.0 && self.motion_scale.is_finite()) {
            return bad("motion_scale must be finite and >= 0");
        }
        if !(self.max_flow_fraction > 0.0) {
            return bad("max_flow_fraction must be positive");
        }
        let [near, far] = self.depth_range;
        if !(near > 0.0 && far >= near) {
            return bad("depth_range must satisfy 0 < near <= far");
        }
        if !(self.max_translation >= 0.0 && self.max_rotation_deg >= 0.0 && self.max_disp >= 0.0) {
            return bad("motion bounds must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, focal length equal to the width, centred principal point.
    pub fn for_size(height: usize, width: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }
}

/// Rigid transform applied to frame-1 camera coordinates: `X' = R X + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rodrigues rotation about unit `axis` by `angle` radians.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 || angle == 0.0 {
            return Self {
                translation,
                ..Self::identity()
            };
        }
        let [x, y, z] = axis.map(|a| a / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Self {
            rotation: [
                [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
                [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
                [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
            ],
            translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// `R^T R = I` to 1e-9 and `det R = +1`.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("rotation determinant {det}")));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidScene {
    pub height: usize,
    pub width: usize,
    /// Row-major depth in metres along the optical axis.
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl RigidScene {
    pub fn validate(&self) -> Result<()> {
        if self.depth.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "{} depth values for {}x{}",
                self.depth.len(),
                self.height,
                self.width
            )));
        }
        if self.depth.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument("depth must be positive and finite".into()));
        }
        self.pose.validate()
    }

    /// Frame-2 position and depth of the point seen at pixel `(x, y)`.
    pub fn project(&self, y: usize, x: usize) -> ([f64; 2], f64) {
        let k = &self.intrinsics;
        let d = self.depth[y * self.width + x];
        let p = [d * (x as f64 - k.cx) / k.fx, d * (y as f64 - k.cy) / k.fy, d];
        let q = self.pose.apply(p);
        ([k.fx * q[0] / q[2] + k.cx, k.fy * q[1] / q[2] + k.cy], q[2])
    }

    fn inside(&self, q: [f64; 2]) -> bool {
        q[0] >= 0.0 && q[0] <= (self.width - 1) as f64 && q[1] >= 0.0 && q[1] <= (self.height - 1) as f64
    }
}

/// Flow induced by the scene's camera motion. Pixels landing behind the
/// camera or outside frame 2 are invalid; their vectors are zero.
pub fn rigid_flow(scene: &RigidScene) -> FlowField<f64> {
    let identity = scene.pose.is_identity();
    FlowField::from_fn(scene.height, scene.width, |y, x| {
        if identity {
            return ([0.0; 2], true);
        }
        let (q, z) = scene.project(y, x);
        if z <= 0.0 || !scene.inside(q) {
            ([0.0; 2], false)
        } else {
            ([q[0] - x as f64, q[1] - y as f64], true)
        }
    })
}

/// Largest distance between `p + flow(p)` and a projection-matrix
/// reprojection of `p`, over valid pixels.
pub fn reprojection_error(scene: &RigidScene, flow: &FlowField<f64>) -> f64 {
    let k = &scene.intrinsics;
    let (r, t) = (&scene.pose.rotation, &scene.pose.translation);
    let kmat = [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]];
    // P = K [R | t]
    let mut proj = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            proj[i][j] = (0..3).map(|m| kmat[i][m] * if j < 3 { r[m][j] } else { t[m] }).sum();
        }
    }
    let mut worst: f64 = 0.0;
    for y in 0..scene.height {
        for x in 0..scene.width {
            if !flow.is_valid(y, x) {
                continue;
            }
            let d = scene.depth[y * scene.width + x];
            let world = [d * (x as f64 - k.cx) / k.fx, d * (y as f64 - k.cy) / k.fy, d, 1.0];
            let h: Vec<f64> = (0..3).map(|i| (0..4).map(|j| proj[i][j] * world[j]).sum()).collect();
            let [u, v] = flow.get(y, x);
            let err = (h[0] / h[2] - (x as f64 + u)).hypot(h[1] / h[2] - (y as f64 + v));
            worst = worst.max(err);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// procedural texture

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1)`; lattice spacing `period`.
fn value_noise(seed: u64, x: f64, y: f64, period: f64) -> f64 {
    let (gx, gy) = (x / period, y / period);
    let (x0, y0) = (gx.floor(), gy.floor());
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (tx, ty) = (fade(gx - x0), fade(gy - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy) * (1.0 - tx) + lattice(seed, ix + 1, iy) * tx;
    let b = lattice(seed, ix, iy + 1) * (1.0 - tx) + lattice(seed, ix + 1, iy + 1) * tx;
    a * (1.0 - ty) + b * ty
}

fn octave_noise(seed: u64, x: f64, y: f64, octaves: &[(f64, f64)]) -> f64 {
    let total: f64 = octaves.iter().map(|o| o.1).sum();
    octaves
        .iter()
        .enumerate()
        .map(|(i, &(period, amp))| amp * value_noise(mix64(seed.wrapping_add(i as u64)), x, y, period))
        .sum::<f64>()
        / total
}

/// Multi-octave value noise pushed through a random color palette; a
/// continuous function of position.
#[derive(Clone, Debug)]
pub struct Texture {
    seed: u64,
    palette: Vec<[f64; 3]>,
}

const TEXTURE_OCTAVES: [(f64, f64); 4] = [(24.0, 0.4), (12.0, 0.3), (6.0, 0.2), (3.0, 0.1)];

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x7465_7874));
        let palette = (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        Self { seed, palette }
    }

    pub fn eval(&self, x: f64, y: f64) -> [f32; 3] {
        let n = octave_noise(self.seed, x, y, &TEXTURE_OCTAVES);
        // octave sums concentrate near 0.5; stretch the contrast
        let t = ((n - 0.5) * 2.5 + 0.5).clamp(0.0, 1.0) * (self.palette.len() - 1) as f64;
        let k = (t.floor() as usize).min(self.palette.len() - 2);
        let f = t - k as f64;
        [0, 1, 2].map(|c| ((1.0 - f) * self.palette[k][c] + f * self.palette[k + 1][c]) as f32)
    }

    pub fn render(&self, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, |y, x| self.eval(x as f64, y as f64))
    }
}

// ---------------------------------------------------------------------------
// rigid scenes

/// Random smooth depth and a random small camera motion, scaled down until
/// the flow respects the configured bound.
pub fn synth_scene(seed: u64, height: usize, width: usize, cfg: &DataConfig) -> RigidScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth_seed: u64 = rng.gen();
    let [near, far] = cfg.depth_range;
    let big = height.max(width) as f64;
    let octaves = [(big, 0.6), (big / 2.0, 0.3), (big / 4.0, 0.1)];
    let depth = (0..height * width)
        .map(|i| {
            let n = octave_noise(depth_seed, (i % width) as f64, (i / width) as f64, &octaves);
            near + (far - near) * n.clamp(0.0, 1.0)
        })
        .collect();

    let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let angle = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let mut dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
    let mag = rng.gen_range(0.0..=1.0) * cfg.max_translation;
    dir = dir.map(|d| d / norm * mag);

    let mut scene = RigidScene {
        height,
        width,
        depth,
        intrinsics: Intrinsics::for_size(height, width),
        pose: Pose::identity(),
    };
    if cfg.motion_scale == 0.0 {
        return scene;
    }
    let bound = cfg.max_flow_fraction * big;
    let mut s = cfg.motion_scale;
    for _ in 0..64 {
        scene.pose = Pose::from_axis_angle(axis, angle * s, dir.map(|d| d * s));
        if max_rigid_flow(&scene) <= bound {
            return scene;
        }
        s *= 0.5;
    }
    scene.pose = Pose::identity();
    scene
}

/// Largest flow magnitude over pixels in front of the camera, whether or not
/// they land inside frame 2.
fn max_rigid_flow(scene: &RigidScene) -> f64 {
    let mut m: f64 = 0.0;
    for y in 0..scene.height {
        for x in 0..scene.width {
            let (q, z) = scene.project(y, x);
            if z <= 0.0 {
                return f64::INFINITY;
            }
            m = m.max((q[0] - x as f64).hypot(q[1] - y as f64));
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMotion {
    /// Linear part about the image centre.
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineMotion {
    pub fn identity() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub fn translation(u: f64, v: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            translation: [u, v],
        }
    }

    /// Flow at pixel `(x, y)` for an image whose centre is `(cx, cy)`.
    pub fn flow_at(&self, x: f64, y: f64, cx: f64, cy: f64) -> [f64; 2] {
        let m = &self.matrix;
        let (px, py) = (x - cx, y - cy);
        [
            (m[0][0] - 1.0) * px + m[0][1] * py + self.translation[0],
            m[1][0] * px + (m[1][1] - 1.0) * py + self.translation[1],
        ]
    }

    /// Preimage in frame 1 of frame-2 position `(x, y)`.
    fn invert(&self, x: f64, y: f64, cx: f64, cy: f64) -> [f64; 2] {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (qx, qy) = (x - cx - self.translation[0], y - cy - self.translation[1]);
        [
            (m[1][1] * qx - m[0][1] * qy) / det + cx,
            (-m[1][0] * qx + m[0][0] * qy) / det + cy,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Rigid { intrinsics: Intrinsics, pose: Pose },
    Affine(AffineMotion),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub texture_seed: u64,
    pub motion: Motion,
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub i1: Image,
    pub i2: Image,
    pub gt: FlowField<f64>,
    pub meta: SampleMeta,
}

/// Bilinear interpolation of a row-major grid; positions are clamped to the
/// grid, so values extend constantly past the border.
fn bilerp(values: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    if x.is_nan() || y.is_nan() {
        return f64::NAN;
    }
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| values[yy * width + xx];
    let top = if fx == 0.0 { at(y0, x0) } else { (1.0 - fx) * at(y0, x0) + fx * at(y0, x1) };
    let bot = if fx == 0.0 { at(y1, x0) } else { (1.0 - fx) * at(y1, x0) + fx * at(y1, x1) };
    if fy == 0.0 {
        top
    } else {
        (1.0 - fy) * top + fy * bot
    }
}

/// Bilinear sample of `img` at a continuous position inside the pixel-centre
/// hull; exact at integer positions.
pub fn sample_image(img: &Image, x: f64, y: f64) -> Option<[f32; 3]> {
    let (h, w) = (img.height(), img.width());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let lerp = |a: [f32; 3], b: [f32; 3], t: f32| {
        if t == 0.0 {
            a
        } else {
            [0, 1, 2].map(|c| (1.0 - t) * a[c] + t * b[c])
        }
    };
    let top = lerp(img.get(y0, x0), img.get(y0, x1), fx);
    let bot = lerp(img.get(y1, x0), img.get(y1, x1), fx);
    Some(lerp(top, bot, fy))
}

/// Textured frame 1, frame 2 by inverse warping along the rigid flow, and the
/// occlusion-aware ground truth.
///
/// Frame-2 pixels are traced back by the fixed point `p = q - flow(p)`
/// started from the nearest surface splatted into that pixel, and show the
/// texture evaluated exactly at `p`. Pixels without a preimage in frame 1
/// receive an unrelated texture.
pub fn render_pair(scene: &RigidScene, texture_seed: u64) -> SamplePair {
    let (h, w) = (scene.height, scene.width);
    let tex = Texture::new(texture_seed);
    let i1 = tex.render(h, w);
    let meta = SampleMeta {
        seed: 0,
        texture_seed,
        motion: Motion::Rigid {
            intrinsics: scene.intrinsics,
            pose: scene.pose,
        },
    };
    if scene.pose.is_identity() {
        return SamplePair {
            i2: i1.clone(),
            i1,
            gt: FlowField::zeros(h, w),
            meta,
        };
    }

    let mut gt = rigid_flow(scene);
    let n = h * w;
    let (mut fu, mut fv, mut z2) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    // forward splat into the nearest frame-2 pixel
    let mut zbuf = vec![f64::INFINITY; n];
    let mut owner = vec![usize::MAX; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (q, z) = scene.project(y, x);
            if z <= 0.0 {
                continue;
            }
            fu[i] = q[0] - x as f64;
            fv[i] = q[1] - y as f64;
            z2[i] = z;
            if let Some(c) = splat_cell(q, h, w) {
                if z < zbuf[c] {
                    zbuf[c] = z;
                    owner[c] = i;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !gt.is_valid(y, x) {
                continue;
            }
            let i = y * w + x;
            let q = [x as f64 + fu[i], y as f64 + fv[i]];
            let nearest = splat_cell(q, h, w).map_or(f64::INFINITY, |c| zbuf[c]);
            if nearest < z2[i] * (1.0 - OCCLUSION_EPS) {
                gt.set_valid(y, x, false);
                gt.set(y, x, [0.0; 2]);
            }
        }
    }

    let fresh = Texture::new(mix64(texture_seed ^ 0x0066_7265_7368));
    let i2 = Image::from_fn(h, w, |qy, qx| {
        let c = qy * w + qx;
        let (tx, ty) = (qx as f64, qy as f64);
        let mut p = if owner[c] == usize::MAX {
            [tx, ty]
        } else {
            [(owner[c] % w) as f64, (owner[c] / w) as f64]
        };
        for _ in 0..INVERT_ITERS {
            let u = bilerp(&fu, h, w, p[0], p[1]);
            let v = bilerp(&fv, h, w, p[0], p[1]);
            if !(u.is_finite() && v.is_finite()) {
                break;
            }
            let next = [tx - u, ty - v];
            let done = (next[0] - p[0]).abs().max((next[1] - p[1]).abs()) < INVERT_TOL * 1e-3;
            p = next;
            if done {
                break;
            }
        }
        let u = bilerp(&fu, h, w, p[0], p[1]);
        let v = bilerp(&fv, h, w, p[0], p[1]);
        let converged = (p[0] + u - tx).hypot(p[1] + v - ty) < INVERT_TOL;
        let m = SEEN_MARGIN;
        let seen = p[0] >= -m && p[1] >= -m && p[0] <= w as f64 - 1.0 + m && p[1] <= h as f64 - 1.0 + m;
        if converged && seen {
            tex.eval(p[0], p[1])
        } else {
            fresh.eval(tx, ty)
        }
    });

    SamplePair { i1, i2, gt, meta }
}

/// Row-major index of the frame-2 pixel nearest to `q`, if in frame.
fn splat_cell(q: [f64; 2], h: usize, w: usize) -> Option<usize> {
    let (x, y) = (q[0].round(), q[1].round());
    (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then(|| y as usize * w + x as usize)
}

// ---------------------------------------------------------------------------
// affine pairs

/// Random affine motion whose flow stays within `max_disp` everywhere on a
/// `height x width` image.
pub fn random_affine(rng: &mut impl Rng, height: usize, width: usize, max_disp: f64) -> AffineMotion {
    let half = max_disp / 2.0;
    let mut dev = [[0.0; 2]; 2];
    for row in dev.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    // the linear part peaks at a corner
    let peak = [(cx, cy), (cx, -cy), (-cx, cy), (-cx, -cy)]
        .iter()
        .map(|&(x, y)| (dev[0][0] * x + dev[0][1] * y).hypot(dev[1][0] * x + dev[1][1] * y))
        .fold(0.0, f64::max);
    let s = if peak > 0.0 { rng.gen_range(0.0..=1.0) * half / peak } else { 0.0 };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = rng.gen_range(0.0..=1.0) * half;
    AffineMotion {
        matrix: [
            [1.0 + s * dev[0][0], s * dev[0][1]],
            [s * dev[1][0], 1.0 + s * dev[1][1]],
        ],
        translation: [r * angle.cos(), r * angle.sin()],
    }
}

/// Frame 2 is the texture evaluated at the analytic preimage of each pixel.
pub fn affine_pair_with(motion: &AffineMotion, texture_seed: u64, height: usize, width: usize) -> SamplePair {
    let tex = Texture::new(texture_seed);
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let i1 = tex.render(height, width);
    let i2 = Image::from_fn(height, width, |y, x| {
        let p = motion.invert(x as f64, y as f64, cx, cy);
        tex.eval(p[0], p[1])
    });
    let gt = FlowField::from_fn(height, width, |y, x| {
        let f = motion.flow_at(x as f64, y as f64, cx, cy);
        let q = [x as f64 + f[0], y as f64 + f[1]];
        let inside = q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (width - 1) as f64 && q[1] <= (height - 1) as f64;
        (f, inside)
    });
    SamplePair {
        i1,
        i2,
        gt,
        meta: SampleMeta {
            seed: 0,
            texture_seed,
            motion: Motion::Affine(motion.clone()),
        },
    }
}

pub fn affine_pair(seed: u64, height: usize, width: usize, max_disp: f64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = random_affine(&mut rng, height, width, max_disp);
    let mut pair = affine_pair_with(&motion, rng.gen(), height, width);
    pair.meta.seed = seed;
    pair
}

/// One sample of the configured kind; a pure function of `(cfg, seed)`.
pub fn generate(cfg: &DataConfig, seed: u64) -> SamplePair {
    match cfg.mode {
        DataMode::Affine => affine_pair(seed, cfg.height, cfg.width, cfg.max_disp),
        DataMode::Rigid => {
            let scene = synth_scene(seed, cfg.height, cfg.width, cfg);
            let mut pair = render_pair(&scene, mix64(seed ^ 0x5eed));
            pair.meta.seed = seed;
            pair
        }
    }
}

/// Rebuild the scene behind a rigid sample.
pub fn regenerate_scene(cfg: &DataConfig, seed: u64) -> RigidScene {
    synth_scene(seed, cfg.height, cfg.width, cfg)
}

#[cfg(test)]
mod tests;

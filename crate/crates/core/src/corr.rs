//! Multi-scale all-pairs correlation pyramid and fixed-radius lookup.
//!
//! Level `k` of the pyramid stores, for every source pixel `p` of the first
//! feature map, the dot products against the second feature map pooled by
//! `2^k`, scaled by `1/sqrt(D)`. A level is a tensor of shape
//! `[batch, h*w, h/2^k, w/2^k]`: the channel axis enumerates source pixels in
//! row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensorops::{Backward, Graph, Taps, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupConfig {
    pub radius: usize,
    pub levels: usize,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self {
            radius: 4,
            levels: 4,
        }
    }
}

impl LookupConfig {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Raw lookup channels per pixel: `levels * (2r + 1)^2`.
    pub fn channels(&self) -> usize {
        self.levels * self.window() * self.window()
    }
}

/// Correlation volumes recorded on a graph.
#[derive(Clone, Debug)]
pub struct CorrPyramid {
    pub levels: Vec<Var>,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
}

struct CorrVolumeOp {
    scale: f64,
}

impl<T: Scalar> Backward<T> for CorrVolumeOp {
    fn name(&self) -> &'static str {
        "corr_volume"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let (f1, f2) = (inputs[0], inputs[1]);
        let [n, d, h, w] = f1.shape();
        let hw = h * w;
        let s = T::of(self.scale);
        let mut df1 = Tensor4::zeros(f1.shape());
        let mut df2 = Tensor4::zeros(f2.shape());
        for b in 0..n {
            let a = &f1.data()[b * d * hw..(b + 1) * d * hw];
            let c = &f2.data()[b * d * hw..(b + 1) * d * hw];
            let gm = &grad.data()[b * hw * hw..(b + 1) * hw * hw];
            // df1 (d x hw) = s * f2 (d x hw) * G^T
            T::gemm(
                d,
                hw,
                hw,
                s,
                c,
                hw as isize,
                1,
                gm,
                1,
                hw as isize,
                T::zero(),
                &mut df1.data_mut()[b * d * hw..(b + 1) * d * hw],
                hw as isize,
                1,
            );
            // df2 (d x hw) = s * f1 (d x hw) * G
            T::gemm(
                d,
                hw,
                hw,
                s,
                a,
                hw as isize,
                1,
                gm,
                hw as isize,
                1,
                T::zero(),
                &mut df2.data_mut()[b * d * hw..(b + 1) * d * hw],
                hw as isize,
                1,
            );
        }
        vec![Some(df1), Some(df2)]
    }
}

/// All-pairs dot products scaled by `1/sqrt(D)`; `[n, h*w, h, w]`.
pub fn corr_volume<T: Scalar>(g: &mut Graph<T>, f1: Var, f2: Var) -> Result<Var> {
    let s1 = g.shape(f1);
    if s1 != g.shape(f2) {
        return Err(shape_err!(
            "correlation of mismatched features {:?} and {:?}",
            s1,
            g.shape(f2)
        ));
    }
    let [n, d, h, w] = s1;
    let hw = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor4::zeros([n, hw, h, w]);
    {
        let (a, c) = (g.value(f1), g.value(f2));
        for b in 0..n {
            T::gemm(
                hw,
                d,
                hw,
                T::of(scale),
                &a.data()[b * d * hw..(b + 1) * d * hw],
                1,
                hw as isize,
                &c.data()[b * d * hw..(b + 1) * d * hw],
                hw as isize,
                1,
                T::zero(),
                &mut out.data_mut()[b * hw * hw..(b + 1) * hw * hw],
                hw as isize,
                1,
            );
        }
    }
    g.add_macs((n * hw * hw * d) as u64);
    Ok(g.record(&[f1, f2], out, CorrVolumeOp { scale }))
}

/// Build `levels` correlation volumes from two `[n, D, h, w]` feature maps.
///
/// Level `k + 1` is level `k` average-pooled by 2 over the target axes,
/// which equals correlating against the pooled second map.
pub fn build_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    f1: Var,
    f2: Var,
    levels: usize,
) -> Result<CorrPyramid> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let [_, d, h, w] = g.shape(f1);
    let mut vols = vec![corr_volume(g, f1, f2)?];
    for _ in 1..levels {
        let prev = *vols.last().expect("non-empty");
        vols.push(g.avg_pool(prev, 2)?);
    }
    Ok(CorrPyramid {
        levels: vols,
        feature_dim: d,
        height: h,
        width: w,
    })
}

struct LookupOp {
    radius: usize,
    levels: usize,
}

impl LookupOp {
    /// Visit every (batch, level, source pixel) with its window centre.
    fn for_each_center<T: Scalar>(
        &self,
        flow: &Tensor4<T>,
        mut f: impl FnMut(usize, usize, usize, usize, usize, T, T),
    ) {
        let [n, _, h, w] = flow.shape();
        for b in 0..n {
            for lvl in 0..self.levels {
                let inv = T::one() / T::of((1usize << lvl) as f64);
                for y in 0..h {
                    for x in 0..w {
                        let u = flow.at(b, 0, y, x);
                        let v = flow.at(b, 1, y, x);
                        let cx = (T::of(x as f64) + u) * inv;
                        let cy = (T::of(y as f64) + v) * inv;
                        f(b, lvl, y, x, y * w + x, cx, cy);
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Backward<T> for LookupOp {
    fn name(&self) -> &'static str {
        "corr_lookup"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let flow = inputs[self.levels];
        let mut dlevels: Vec<Tensor4<T>> = inputs[..self.levels]
            .iter()
            .map(|t| Tensor4::zeros(t.shape()))
            .collect();
        let mut dflow = Tensor4::zeros(flow.shape());
        let win = 2 * self.radius + 1;
        let r = self.radius as isize;
        self.for_each_center(flow, |b, lvl, y, x, p, cx, cy| {
            let vol = inputs[lvl];
            let [_, _, hk, wk] = vol.shape();
            let off = vol.index(b, p, 0, 0);
            let plane = &vol.data()[off..off + hk * wk];
            let base = Taps::at(cx, cy);
            let mut sx = T::zero();
            let mut sy = T::zero();
            for dy in -r..=r {
                for dx in -r..=r {
                    let ch = lvl * win * win + (dy + r) as usize * win + (dx + r) as usize;
                    let gv = grad.at(b, ch, y, x);
                    if gv == T::zero() {
                        continue;
                    }
                    let t = Taps {
                        x0: base.x0 + dx,
                        y0: base.y0 + dy,
                        ..base
                    };
                    let (gx, gy) = t.slopes(plane, hk, wk);
                    sx += gv * gx;
                    sy += gv * gy;
                    t.scatter(&mut dlevels[lvl].data_mut()[off..off + hk * wk], hk, wk, gv);
                }
            }
            let inv = T::one() / T::of((1usize << lvl) as f64);
            let i0 = dflow.index(b, 0, y, x);
            let i1 = dflow.index(b, 1, y, x);
            dflow.data_mut()[i0] += sx * inv;
            dflow.data_mut()[i1] += sy * inv;
        });
        let mut out: Vec<Option<Tensor4<T>>> = dlevels.into_iter().map(Some).collect();
        out.push(Some(dflow));
        out
    }
}

/// Sample a `(2r+1)^2` window from every pyramid level around each pixel's
/// current correspondence `(p + flow(p)) / 2^k`.
///
/// `flow` is `[n, 2, h, w]` with `(u, v)` in base-resolution pixels. The
/// output is `[n, L*(2r+1)^2, h, w]`, channels ordered level-major and then
/// row-major over the window (`dy` outer, `dx` inner).
pub fn lookup<T: Scalar>(
    g: &mut Graph<T>,
    pyr: &CorrPyramid,
    flow: Var,
    cfg: LookupConfig,
) -> Result<Var> {
    let [n, two, h, w] = g.shape(flow);
    if two != 2 || h != pyr.height || w != pyr.width {
        return Err(shape_err!(
            "flow {:?} does not match pyramid base {}x{}",
            g.shape(flow),
            pyr.height,
            pyr.width
        ));
    }
    if cfg.levels == 0 || cfg.levels > pyr.levels.len() {
        return Err(Error::InvalidArgument(format!(
            "lookup over {} levels of a {}-level pyramid",
            cfg.levels,
            pyr.levels.len()
        )));
    }
    let op = LookupOp {
        radius: cfg.radius,
        levels: cfg.levels,
    };
    let win = cfg.window();
    let r = cfg.radius as isize;
    let mut out = Tensor4::zeros([n, cfg.channels(), h, w]);
    {
        let flow_t = g.value(flow);
        let vols: Vec<&Tensor4<T>> = pyr.levels[..cfg.levels].iter().map(|&v| g.value(v)).collect();
        op.for_each_center(flow_t, |b, lvl, y, x, p, cx, cy| {
            let vol = vols[lvl];
            let [_, _, hk, wk] = vol.shape();
            let off = vol.index(b, p, 0, 0);
            let plane = &vol.data()[off..off + hk * wk];
            let base = Taps::at(cx, cy);
            for dy in -r..=r {
                for dx in -r..=r {
                    let t = Taps {
                        x0: base.x0 + dx,
                        y0: base.y0 + dy,
                        ..base
                    };
                    let ch = lvl * win * win + (dy + r) as usize * win + (dx + r) as usize;
                    out.set(b, ch, y, x, t.sample(plane, hk, wk));
                }
            }
        });
    }
    let mut inputs: Vec<Var> = pyr.levels[..cfg.levels].to_vec();
    inputs.push(flow);
    Ok(g.record(&inputs, out, op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_pixel_unit_feature() {
        let d = 8;
        let f = Tensor4::from_fn([1, d, 1, 1], |[_, c, _, _]| if c == 3 { 1.0 } else { 0.0 });
        let mut g = Graph::<f64>::new();
        let a = g.constant(f.clone());
        let b = g.constant(f);
        let pyr = build_pyramid(&mut g, a, b, 1).unwrap();
        let v = g.value(pyr.levels[0]);
        assert_eq!(v.shape(), [1, 1, 1, 1]);
        assert!((v.data()[0] - 1.0 / (d as f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_features_do_not_correlate() {
        // pixel 0 carries e0, pixel 1 carries e1
        let f = Tensor4::from_fn([1, 2, 1, 2], |[_, c, _, x]| if c == x { 1.0 } else { 0.0 });
        let mut g = Graph::<f64>::new();
        let a = g.constant(f.clone());
        let b = g.constant(f);
        let pyr = build_pyramid(&mut g, a, b, 1).unwrap();
        let v = g.value(pyr.levels[0]);
        assert_eq!(v.at(0, 0, 0, 1), 0.0);
        assert_eq!(v.at(0, 1, 0, 0), 0.0);
        assert!(v.at(0, 0, 0, 0) > 0.0);
    }

    #[test]
    fn mismatched_features_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor4::zeros([1, 4, 2, 2]));
        let b = g.constant(Tensor4::zeros([1, 4, 2, 3]));
        assert!(build_pyramid(&mut g, a, b, 2).is_err());
    }

    #[test]
    fn lookup_channel_count_from_defaults() {
        assert_eq!(LookupConfig::default().channels(), 324);
    }

    #[test]
    fn zero_flow_center_tap_reads_own_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let a = g.constant(rand_t(&mut rng, [1, 4, 3, 4]));
        let b = g.constant(rand_t(&mut rng, [1, 4, 3, 4]));
        let pyr = build_pyramid(&mut g, a, b, 1).unwrap();
        let flow = g.constant(Tensor4::zeros([1, 2, 3, 4]));
        let cfg = LookupConfig { radius: 0, levels: 1 };
        let out = lookup(&mut g, &pyr, flow, cfg).unwrap();
        let v0 = g.value(pyr.levels[0]);
        let o = g.value(out);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(o.at(0, 0, y, x), v0.at(0, y * 4 + x, y, x));
            }
        }
    }

    #[test]
    fn negative_radius_equivalent_is_unrepresentable_and_levels_checked() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor4::zeros([1, 2, 2, 2]));
        let pyr = build_pyramid(&mut g, a, a, 2).unwrap();
        let flow = g.constant(Tensor4::zeros([1, 2, 2, 2]));
        let cfg = LookupConfig { radius: 1, levels: 3 };
        assert!(lookup(&mut g, &pyr, flow, cfg).is_err());
        let wrong = g.constant(Tensor4::zeros([1, 2, 3, 2]));
        assert!(lookup(&mut g, &pyr, wrong, LookupConfig { radius: 1, levels: 1 }).is_err());
    }

    #[test]
    fn integer_flow_shift_moves_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w) = (6, 6);
        let mut g = Graph::<f64>::new();
        let a = g.constant(rand_t(&mut rng, [1, 3, h, w]));
        let b = g.constant(rand_t(&mut rng, [1, 3, h, w]));
        let pyr = build_pyramid(&mut g, a, b, 1).unwrap();
        let cfg = LookupConfig { radius: 1, levels: 1 };
        let t = (2isize, -1isize);
        let flow = g.constant(Tensor4::from_fn([1, 2, h, w], |[_, c, _, _]| {
            if c == 0 {
                t.0 as f64
            } else {
                t.1 as f64
            }
        }));
        let out = lookup(&mut g, &pyr, flow, cfg).unwrap();
        let v0 = g.value(pyr.levels[0]).clone();
        let o = g.value(out);
        for y in 0..h {
            for x in 0..w {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let ch = ((dy + 1) * 3 + dx + 1) as usize;
                        let (qy, qx) = (y as isize + t.1 + dy, x as isize + t.0 + dx);
                        let want = if qy >= 0 && qx >= 0 && qy < h as isize && qx < w as isize {
                            v0.at(0, y * w + x, qy as usize, qx as usize)
                        } else {
                            0.0
                        };
                        assert_eq!(o.at(0, ch, y, x), want);
                    }
                }
            }
        }
    }

    #[test]
    fn lookup_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let f1 = rand_t(&mut rng, [1, 3, 4, 4]);
            let f2 = rand_t(&mut rng, [1, 3, 4, 4]);
            // fractional parts at least 0.25 from the lattice at every level
            let flow = Tensor4::from_fn([1, 2, 4, 4], |_| {
                rng.gen_range(-2..2) as f64 * 4.0 + rng.gen_range(1.0..3.0)
            });
            let rep = check_gradients(
                &[f1, f2, flow],
                |g, v| {
                    let pyr = build_pyramid(g, v[0], v[1], 2)?;
                    lookup(g, &pyr, v[2], LookupConfig { radius: 1, levels: 2 })
                },
                1e-5,
                Some(30),
                seed,
            )
            .unwrap();
            assert!(rep.max_err <= 1e-4, "seed {seed}: {rep:?}");
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensorops::Tensor4;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adaptive-moment state with weight decay decoupled from the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    /// Number of updates applied so far.
    pub t: u64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: impl IntoIterator<Item = [usize; 4]>, weight_decay: f64) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor4::zeros(s), Tensor4::zeros(s))).unzip();
        Self { m, v, t: 0, weight_decay }
    }

    /// One bias-corrected update of every weight tensor.
    pub fn step(&mut self, weights: &mut [&mut Tensor4<T>], grads: &[&Tensor4<T>], lr: f64) -> Result<()> {
        if weights.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err!(
                "{} weights and {} gradients for {} moment slots",
                weights.len(),
                grads.len(),
                self.m.len()
            ));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (a1, a2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let (c1, c2, eps) = (T::of(c1), T::of(c2), T::of(EPSILON));
        let (lr_t, decay) = (T::of(lr), T::of(lr * self.weight_decay));
        for (i, (w, g)) in weights.iter_mut().zip(grads).enumerate() {
            if w.shape() != g.shape() || w.shape() != self.m[i].shape() {
                return Err(shape_err!("slot {i}: weight {:?}, gradient {:?}", w.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + a1 * g;
                *v = b2 * *v + a2 * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr_t * mh / (vh.sqrt() + eps) + decay * *w;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up from `lr / 25` over the first 5% of steps, then linear
    /// decay to `lr / 25e4`.
    OneCycle,
}

pub const WARMUP_FRACTION: f64 = 0.05;
pub const DIV_FACTOR: f64 = 25.0;
pub const FINAL_DIV_FACTOR: f64 = 1e4;

impl LrSchedule {
    pub fn rate(self, peak: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => peak,
            LrSchedule::OneCycle => {
                let start = peak / DIV_FACTOR;
                let end = start / FINAL_DIV_FACTOR;
                let warm = (WARMUP_FRACTION * total as f64).max(1.0);
                let s = step as f64;
                if s < warm {
                    start + (peak - start) * s / warm
                } else {
                    let span = (total as f64 - warm).max(1.0);
                    let p = ((s - warm) / span).min(1.0);
                    peak + (end - peak) * p
                }
            }
        }
    }
}

/// Global L2 norm over every gradient tensor, accumulated in double precision.
pub fn global_norm<T: Scalar>(grads: &[&Tensor4<T>]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_by_global_norm<T: Scalar>(grads: &mut [Tensor4<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm.is_finite() && norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

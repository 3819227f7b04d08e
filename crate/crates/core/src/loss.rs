//! Training objectives.
//!
//! The mixture losses model each flow direction independently with a
//! two-component density whose first component has unit scale (log-scale
//! fixed at 0), so a confident pixel is penalized exactly like L1 plus a
//! constant. Everything is evaluated in log space with log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{FlowField, MoLParams};
use crate::scalar::Scalar;
use crate::tensorops::{sigmoid, Backward, Graph, Tensor4, Var};

const LN_2: f64 = std::f64::consts::LN_2;
/// `0.5 * ln(2 pi)`
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mixture of Laplace, first log-scale fixed at 0, second in `[0, upper]`.
    Mol,
    /// Single Laplace with a regressed log-scale in `[-upper, upper]`.
    NaiveLaplace,
    /// Mixture of Laplace with both log-scales free in `[-upper, upper]`.
    NaiveMol,
    L1,
    /// Mixture of Gaussians, `sigma1 = 1`, `sigma2 = exp(beta2)`.
    Mog,
}

impl LossKind {
    /// Extra head channels regressed next to the flow residual.
    pub fn info_channels(self) -> usize {
        match self {
            LossKind::Mol | LossKind::Mog => 2,
            LossKind::NaiveLaplace => 1,
            LossKind::NaiveMol => 3,
            LossKind::L1 => 0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Mol => "Mixture-of-Laplace",
            LossKind::NaiveLaplace => "Naive Single Laplace",
            LossKind::NaiveMol => "Naive Mixture-of-Laplace",
            LossKind::L1 => "L1",
            LossKind::Mog => "Mixture-of-Gaussian",
        }
    }

    pub fn param_range(self) -> &'static str {
        match self {
            LossKind::Mol => "beta1=0, beta2 in [0,10]",
            LossKind::NaiveLaplace => "beta in [-10,10]",
            LossKind::NaiveMol => "beta1,beta2 in [-10,10]",
            LossKind::L1 => "-",
            LossKind::Mog => "sigma1=1, sigma2=e^beta2, beta2 in [0,10]",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta_upper: f64,
    pub kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            beta_upper: 10.0,
            kind: LossKind::Mol,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("loss.gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.beta_upper > 0.0) {
            return Err(Error::Config("loss.beta_upper must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Family {
    Laplace,
    Gaussian,
}

impl Family {
    /// Log density of a zero-mean component with log-scale `beta`, and its
    /// partial derivatives w.r.t. the residual and `beta`.
    #[inline]
    fn log_density(self, e: f64, beta: f64) -> (f64, f64, f64) {
        let inv = (-beta).exp();
        match self {
            Family::Laplace => {
                let a = e.abs() * inv;
                let sign = if e > 0.0 {
                    1.0
                } else if e < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (-a - beta - LN_2, -sign * inv, a - 1.0)
            }
            Family::Gaussian => {
                let z = e * inv;
                (-0.5 * z * z - beta - HALF_LN_2PI, -z * inv, z * z - 1.0)
            }
        }
    }
}

/// Negative log of a two-component mixture at residual `e`, with gradients
/// `(value, d/de, d/dlogit, d/dbeta1, d/dbeta2)` where `alpha = sigmoid(logit)`.
/// Differentiating through the logit keeps the weight gradient bounded.
#[inline]
pub(crate) fn mixture_term(
    family: Family,
    e: f64,
    alpha: f64,
    beta1: f64,
    beta2: f64,
) -> (f64, f64, f64, f64, f64) {
    let (lp1, de1, db1) = family.log_density(e, beta1);
    let (lp2, de2, db2) = family.log_density(e, beta2);
    let c1 = alpha.ln() + lp1;
    let c2 = (1.0 - alpha).ln() + lp2;
    let m = c1.max(c2);
    let lse = m + ((c1 - m).exp() + (c2 - m).exp()).ln();
    let r1 = (c1 - lse).exp();
    let r2 = (c2 - lse).exp();
    (-lse, -(r1 * de1 + r2 * de2), alpha - r1, -r1 * db1, -r2 * db2)
}

/// Per-pixel Laplace term `log(2b) + |e|_1 / (2b)` with `b = exp(logb)`;
/// returns `(value, d/de_x, d/de_y, d/dlogb)`.
#[inline]
pub(crate) fn naive_laplace_term(ex: f64, ey: f64, logb: f64) -> (f64, f64, f64, f64) {
    let inv = (-logb).exp();
    let l1 = ex.abs() + ey.abs();
    let sgn = |e: f64| if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
    (
        LN_2 + logb + 0.5 * l1 * inv,
        0.5 * sgn(ex) * inv,
        0.5 * sgn(ey) * inv,
        1.0 - 0.5 * l1 * inv,
    )
}

fn check_pair<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<usize> {
    if !pred.same_shape(gt) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    let n = gt.n_valid();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    for i in 0..gt.len() {
        if !gt.valid()[i] {
            continue;
        }
        let vals = [pred.u_plane()[i], pred.v_plane()[i], gt.u_plane()[i], gt.v_plane()[i]];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow at pixel {i}")));
        }
    }
    Ok(n)
}

fn check_plane<T: Scalar>(name: &str, t: &Tensor4<T>, h: usize, w: usize, lo: f64, hi: f64) -> Result<()> {
    if t.shape() != [1, 1, h, w] {
        return Err(shape_err!("{name} has shape {:?}, expected [1, 1, {h}, {w}]", t.shape()));
    }
    for v in t.data() {
        let v = v.f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        if v < lo || v > hi {
            return Err(Error::InvalidArgument(format!("{name} value {v} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

fn mixture_eval<T: Scalar>(
    family: Family,
    pred: &FlowField<T>,
    mol: &MoLParams<T>,
    gt: &FlowField<T>,
    beta_upper: f64,
) -> Result<f64> {
    let n = check_pair(pred, gt)?;
    let (h, w) = (gt.height(), gt.width());
    check_plane("alpha", &mol.alpha, h, w, 0.0, 1.0)?;
    check_plane("beta2", &mol.beta2, h, w, 0.0, beta_upper)?;
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..gt.len() {
        if !gt.valid()[i] {
            continue;
        }
        let a = mol.alpha.data()[i].f64();
        let b2 = mol.beta2.data()[i].f64();
        for (g, p) in [(gt.u_plane()[i], pred.u_plane()[i]), (gt.v_plane()[i], pred.v_plane()[i])] {
            terms.push(mixture_term(family, g.f64() - p.f64(), a, 0.0, b2).0);
        }
    }
    Ok(pairwise_sum(&terms) / (2 * n) as f64)
}

/// Mixture-of-Laplace negative log-likelihood averaged over both directions
/// of every valid pixel.
pub fn mol_nll<T: Scalar>(
    pred: &FlowField<T>,
    mol: &MoLParams<T>,
    gt: &FlowField<T>,
    beta_upper: f64,
) -> Result<f64> {
    mixture_eval(Family::Laplace, pred, mol, gt, beta_upper)
}

/// Mixture-of-Gaussian counterpart of [`mol_nll`].
pub fn mog_nll<T: Scalar>(
    pred: &FlowField<T>,
    mol: &MoLParams<T>,
    gt: &FlowField<T>,
    beta_upper: f64,
) -> Result<f64> {
    mixture_eval(Family::Gaussian, pred, mol, gt, beta_upper)
}

/// Single Laplace with shared per-pixel log-scale, averaged over valid pixels.
/// `log_scale` is clamped to `[-beta_upper, beta_upper]`.
pub fn naive_laplace_nll<T: Scalar>(
    pred: &FlowField<T>,
    log_scale: &Tensor4<T>,
    gt: &FlowField<T>,
    beta_upper: f64,
) -> Result<f64> {
    let n = check_pair(pred, gt)?;
    check_plane("log_scale", log_scale, gt.height(), gt.width(), f64::MIN, f64::MAX)?;
    let terms: Vec<f64> = (0..gt.len())
        .filter(|&i| gt.valid()[i])
        .map(|i| {
            let ex = gt.u_plane()[i].f64() - pred.u_plane()[i].f64();
            let ey = gt.v_plane()[i].f64() - pred.v_plane()[i].f64();
            let lb = log_scale.data()[i].f64().clamp(-beta_upper, beta_upper);
            naive_laplace_term(ex, ey, lb).0
        })
        .collect();
    Ok(pairwise_sum(&terms) / n as f64)
}

/// Mean over valid pixels of `|e_x| + |e_y|`.
pub fn l1_loss<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    let n = check_pair(pred, gt)?;
    let terms: Vec<f64> = (0..gt.len())
        .filter(|&i| gt.valid()[i])
        .map(|i| {
            (gt.u_plane()[i].f64() - pred.u_plane()[i].f64()).abs()
                + (gt.v_plane()[i].f64() - pred.v_plane()[i].f64()).abs()
        })
        .collect();
    Ok(pairwise_sum(&terms) / n as f64)
}

/// `sum_i gamma^(N - i) * L_i` over losses ordered from the initial
/// prediction (`i = 0`) to the last refinement (`i = N`).
pub fn sequence_loss(losses: &[f64], gamma: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("sequence loss over zero predictions".into()));
    }
    let last = losses.len() - 1;
    Ok(losses
        .iter()
        .enumerate()
        .map(|(i, l)| gamma.powi((last - i) as i32) * l)
        .sum())
}

/// Summation by recursive halving; keeps rounding error `O(log n)`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

// ---------------------------------------------------------------------------
// graph operators

/// Ground truth carried by a loss op: `[n, 2, h, w]` targets plus mask.
#[derive(Clone)]
pub struct Target<T> {
    pub flow: Tensor4<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Target<T> {
    pub fn from_fields(fields: &[&FlowField<T>]) -> Result<Self> {
        let tensors: Vec<Tensor4<T>> = fields.iter().map(|f| f.tensor().clone()).collect();
        let flow = Tensor4::stack(&tensors)?;
        let valid = fields.iter().flat_map(|f| f.valid().iter().copied()).collect();
        Ok(Self { flow, valid })
    }

    fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(batch, pixel)` pairs of valid entries.
    fn valid_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let plane = self.flow.plane();
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / plane, i % plane))
    }
}

fn flow_offsets(shape: [usize; 4], b: usize, p: usize) -> (usize, usize) {
    let plane = shape[2] * shape[3];
    (b * 2 * plane + p, b * 2 * plane + plane + p)
}

struct MixtureOp<T> {
    family: Family,
    target: Target<T>,
    free_beta1: bool,
}

impl<T: Scalar> MixtureOp<T> {
    fn eval(&self, inputs: &[&Tensor4<T>], grads: Option<&mut [Tensor4<T>]>, seed: f64) -> f64 {
        let flow = inputs[0];
        let logit = inputs[1];
        let beta1 = self.free_beta1.then(|| inputs[2]);
        let beta2 = inputs[if self.free_beta1 { 3 } else { 2 }];
        let norm = 1.0 / (2 * self.target.n_valid()) as f64;
        let plane = flow.plane();
        let mut terms = Vec::new();
        let mut grads = grads;
        for (b, p) in self.target.valid_pixels() {
            let (iu, iv) = flow_offsets(flow.shape(), b, p);
            let ip = b * plane + p;
            let a = sigmoid(logit.data()[ip].f64());
            let b1 = beta1.map_or(0.0, |t| t.data()[ip].f64());
            let b2 = beta2.data()[ip].f64();
            for i in [iu, iv] {
                let e = self.target.flow.data()[i].f64() - flow.data()[i].f64();
                let (v, de, da, db1, db2) = mixture_term(self.family, e, a, b1, b2);
                terms.push(v);
                if let Some(g) = grads.as_deref_mut() {
                    let s = seed * norm;
                    // e = gt - pred
                    g[0].data_mut()[i] += T::of(-de * s);
                    g[1].data_mut()[ip] += T::of(da * s);
                    if self.free_beta1 {
                        g[2].data_mut()[ip] += T::of(db1 * s);
                        g[3].data_mut()[ip] += T::of(db2 * s);
                    } else {
                        g[2].data_mut()[ip] += T::of(db2 * s);
                    }
                }
            }
        }
        pairwise_sum(&terms) * norm
    }
}

impl<T: Scalar> Backward<T> for MixtureOp<T> {
    fn name(&self) -> &'static str {
        "mixture_nll"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let mut gs: Vec<Tensor4<T>> = inputs.iter().map(|t| Tensor4::zeros(t.shape())).collect();
        self.eval(inputs, Some(&mut gs), grad.data()[0].f64());
        gs.into_iter().map(Some).collect()
    }
}

struct NaiveLaplaceOp<T> {
    target: Target<T>,
}

impl<T: Scalar> NaiveLaplaceOp<T> {
    fn eval(&self, flow: &Tensor4<T>, logb: &Tensor4<T>, grads: Option<(&mut Tensor4<T>, &mut Tensor4<T>)>, seed: f64) -> f64 {
        let norm = 1.0 / self.target.n_valid() as f64;
        let plane = flow.plane();
        let mut terms = Vec::new();
        let mut grads = grads;
        for (b, p) in self.target.valid_pixels() {
            let (iu, iv) = flow_offsets(flow.shape(), b, p);
            let ip = b * plane + p;
            let ex = self.target.flow.data()[iu].f64() - flow.data()[iu].f64();
            let ey = self.target.flow.data()[iv].f64() - flow.data()[iv].f64();
            let (v, dx, dy, dl) = naive_laplace_term(ex, ey, logb.data()[ip].f64());
            terms.push(v);
            if let Some((gf, gl)) = grads.as_mut() {
                let s = seed * norm;
                gf.data_mut()[iu] += T::of(-dx * s);
                gf.data_mut()[iv] += T::of(-dy * s);
                gl.data_mut()[ip] += T::of(dl * s);
            }
        }
        pairwise_sum(&terms) * norm
    }
}

impl<T: Scalar> Backward<T> for NaiveLaplaceOp<T> {
    fn name(&self) -> &'static str {
        "naive_laplace_nll"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let mut gf = Tensor4::zeros(inputs[0].shape());
        let mut gl = Tensor4::zeros(inputs[1].shape());
        self.eval(inputs[0], inputs[1], Some((&mut gf, &mut gl)), grad.data()[0].f64());
        vec![Some(gf), Some(gl)]
    }
}

struct L1Op<T> {
    target: Target<T>,
}

impl<T: Scalar> L1Op<T> {
    fn eval(&self, flow: &Tensor4<T>, grad: Option<&mut Tensor4<T>>, seed: f64) -> f64 {
        let norm = 1.0 / self.target.n_valid() as f64;
        let mut terms = Vec::new();
        let mut grad = grad;
        for (b, p) in self.target.valid_pixels() {
            let (iu, iv) = flow_offsets(flow.shape(), b, p);
            for i in [iu, iv] {
                let e = self.target.flow.data()[i].f64() - flow.data()[i].f64();
                terms.push(e.abs());
                if let Some(g) = grad.as_deref_mut() {
                    // subgradient 0 at e = 0
                    let d = if e > 0.0 {
                        -1.0
                    } else if e < 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                    g.data_mut()[i] += T::of(d * seed * norm);
                }
            }
        }
        pairwise_sum(&terms) * norm
    }
}

impl<T: Scalar> Backward<T> for L1Op<T> {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let mut g = Tensor4::zeros(inputs[0].shape());
        self.eval(inputs[0], Some(&mut g), grad.data()[0].f64());
        vec![Some(g)]
    }
}

fn check_target<T: Scalar>(g: &Graph<T>, flow: Var, target: &Target<T>) -> Result<()> {
    if g.shape(flow) != target.flow.shape() {
        return Err(shape_err!(
            "prediction {:?} vs target {:?}",
            g.shape(flow),
            target.flow.shape()
        ));
    }
    if target.n_valid() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Graph form of the mixture losses. The first component's weight enters as
/// a logit; `beta1 = None` fixes its log-scale at 0.
pub fn mixture_nll_var<T: Scalar>(
    g: &mut Graph<T>,
    gaussian: bool,
    flow: Var,
    alpha_logit: Var,
    beta1: Option<Var>,
    beta2: Var,
    target: &Target<T>,
) -> Result<Var> {
    check_target(g, flow, target)?;
    let op = MixtureOp {
        family: if gaussian { Family::Gaussian } else { Family::Laplace },
        target: target.clone(),
        free_beta1: beta1.is_some(),
    };
    let mut inputs = vec![flow, alpha_logit];
    inputs.extend(beta1);
    inputs.push(beta2);
    let v = {
        let vals: Vec<&Tensor4<T>> = inputs.iter().map(|&v| g.value(v)).collect();
        op.eval(&vals, None, 1.0)
    };
    Ok(g.record(&inputs, Tensor4::scalar(T::of(v)), op))
}

pub fn naive_laplace_var<T: Scalar>(g: &mut Graph<T>, flow: Var, logb: Var, target: &Target<T>) -> Result<Var> {
    check_target(g, flow, target)?;
    let op = NaiveLaplaceOp { target: target.clone() };
    let v = op.eval(g.value(flow), g.value(logb), None, 1.0);
    Ok(g.record(&[flow, logb], Tensor4::scalar(T::of(v)), op))
}

pub fn l1_var<T: Scalar>(g: &mut Graph<T>, flow: Var, target: &Target<T>) -> Result<Var> {
    check_target(g, flow, target)?;
    let op = L1Op { target: target.clone() };
    let v = op.eval(g.value(flow), None, 1.0);
    Ok(g.record(&[flow], Tensor4::scalar(T::of(v)), op))
}

/// Map raw head channels to the distribution parameters of `kind`:
/// `(alpha_logit, beta1, beta2)` where absent entries are `None`.
pub fn info_params<T: Scalar>(
    g: &mut Graph<T>,
    kind: LossKind,
    info: Var,
    beta_upper: f64,
) -> Result<(Option<Var>, Option<Var>, Option<Var>)> {
    let up = T::of(beta_upper);
    Ok(match kind {
        LossKind::Mol | LossKind::Mog => {
            let a = g.slice_channels(info, 0, 1)?;
            let b2 = g.slice_channels(info, 1, 1)?;
            let b2 = g.clamp(b2, T::zero(), up);
            (Some(a), None, Some(b2))
        }
        LossKind::NaiveLaplace => {
            let b = g.slice_channels(info, 0, 1)?;
            (None, None, Some(g.clamp(b, -up, up)))
        }
        LossKind::NaiveMol => {
            let a = g.slice_channels(info, 0, 1)?;
            let b1 = g.slice_channels(info, 1, 1)?;
            let b1 = g.clamp(b1, -up, up);
            let b2 = g.slice_channels(info, 2, 1)?;
            let b2 = g.clamp(b2, -up, up);
            (Some(a), Some(b1), Some(b2))
        }
        LossKind::L1 => (None, None, None),
    })
}

/// Loss of one full-resolution prediction under `kind`.
pub fn prediction_loss<T: Scalar>(
    g: &mut Graph<T>,
    kind: LossKind,
    beta_upper: f64,
    flow: Var,
    info: Option<Var>,
    target: &Target<T>,
) -> Result<Var> {
    let need = kind.info_channels();
    let info = match (need, info) {
        (0, _) => None,
        (_, Some(i)) if g.shape(i)[1] == need => Some(i),
        _ => return Err(shape_err!("{:?} loss needs {} info channels", kind, need)),
    };
    let params = match info {
        Some(i) => info_params(g, kind, i, beta_upper)?,
        None => (None, None, None),
    };
    match (kind, params) {
        (LossKind::Mol, (Some(a), None, Some(b2))) => mixture_nll_var(g, false, flow, a, None, b2, target),
        (LossKind::Mog, (Some(a), None, Some(b2))) => mixture_nll_var(g, true, flow, a, None, b2, target),
        (LossKind::NaiveMol, (Some(a), Some(b1), Some(b2))) => {
            mixture_nll_var(g, false, flow, a, Some(b1), b2, target)
        }
        (LossKind::NaiveLaplace, (None, None, Some(b))) => naive_laplace_var(g, flow, b, target),
        (LossKind::L1, _) => l1_var(g, flow, target),
        _ => unreachable!("info_params covers every kind"),
    }
}

/// Graph form of [`sequence_loss`].
pub fn sequence_loss_var<T: Scalar>(g: &mut Graph<T>, losses: &[Var], gamma: f64) -> Result<Var> {
    let last = losses
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidArgument("sequence loss over zero predictions".into()))?;
    let mut total: Option<Var> = None;
    for (i, &l) in losses.iter().enumerate() {
        let w = g.scale(l, T::of(gamma.powi((last - i) as i32)));
        total = Some(match total {
            None => w,
            Some(t) => g.add(t, w)?,
        });
    }
    Ok(total.expect("non-empty"))
}

//! Benchmark-style flow metrics.
//!
//! All reductions run in `f64` with pairwise summation; percentages are in
//! `[0, 100]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::FlowField;
use crate::loss::pairwise_sum;
use crate::scalar::Scalar;

/// Number of WAUC thresholds, spaced 0.05 px up to 5 px.
pub const WAUC_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe: f64,
    pub px1: f64,
    pub fl_all: f64,
    pub wauc: f64,
    pub n_valid: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "epe,px1,fl_all,wauc,n_valid";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.4},{:.4},{:.4},{}",
            self.epe, self.px1, self.fl_all, self.wauc, self.n_valid
        )
    }

    /// Valid-pixel-weighted mean of per-sample reports.
    pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
        let n: usize = reports.iter().map(|r| r.n_valid).sum();
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        let mean = |f: fn(&MetricReport) -> f64| {
            let terms: Vec<f64> = reports.iter().map(|r| f(r) * r.n_valid as f64).collect();
            pairwise_sum(&terms) / n as f64
        };
        Ok(MetricReport {
            epe: mean(|r| r.epe),
            px1: mean(|r| r.px1),
            fl_all: mean(|r| r.fl_all),
            wauc: mean(|r| r.wauc),
            n_valid: n,
        })
    }
}

/// Per-pixel `(endpoint error, ground-truth magnitude)` for valid pixels.
fn valid_errors<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<Vec<(f64, f64)>> {
    if !pred.same_shape(gt) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    let out: Vec<(f64, f64)> = (0..gt.len())
        .filter(|&i| gt.valid()[i])
        .map(|i| {
            let (gu, gv) = (gt.u_plane()[i].f64(), gt.v_plane()[i].f64());
            let du = pred.u_plane()[i].f64() - gu;
            let dv = pred.v_plane()[i].f64() - gv;
            (du.hypot(dv), gu.hypot(gv))
        })
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyMask);
    }
    if out.iter().any(|(e, m)| !e.is_finite() || !m.is_finite()) {
        return Err(Error::NonFinite("flow vectors".into()));
    }
    Ok(out)
}

/// Endpoint error per pixel; `None` where the ground truth is invalid.
pub fn error_map<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<Vec<Option<f64>>> {
    valid_errors(pred, gt)?;
    Ok((0..gt.len())
        .map(|i| {
            gt.valid()[i].then(|| {
                let du = pred.u_plane()[i].f64() - gt.u_plane()[i].f64();
                let dv = pred.v_plane()[i].f64() - gt.v_plane()[i].f64();
                du.hypot(dv)
            })
        })
        .collect())
}

fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

fn epe_of(errs: &[(f64, f64)]) -> f64 {
    let e: Vec<f64> = errs.iter().map(|p| p.0).collect();
    pairwise_sum(&e) / e.len() as f64
}

fn px1_of(errs: &[(f64, f64)]) -> f64 {
    percent(errs.iter().filter(|p| p.0 > 1.0).count(), errs.len())
}

fn fl_of(errs: &[(f64, f64)]) -> f64 {
    percent(
        errs.iter().filter(|&&(e, m)| e > 3.0 && e > 0.05 * m).count(),
        errs.len(),
    )
}

/// `(threshold, weight)` pairs of the WAUC sweep.
pub fn wauc_weights() -> impl Iterator<Item = (f64, f64)> {
    (1..=WAUC_STEPS).map(|i| {
        let d = 0.05 * i as f64;
        (d, 1.0 - d / 5.0)
    })
}

fn wauc_of(errs: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<f64> = errs.iter().map(|p| p.0).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (d, w) in wauc_weights() {
        let inliers = sorted.partition_point(|&e| e <= d);
        num += w * inliers as f64 / n;
        den += w;
    }
    100.0 * num / den
}

pub fn epe<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    Ok(epe_of(&valid_errors(pred, gt)?))
}

/// Percentage of valid pixels with endpoint error strictly above 1 px.
pub fn px1<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    Ok(px1_of(&valid_errors(pred, gt)?))
}

/// Percentage of valid pixels with error above 3 px and above 5% of the
/// ground-truth magnitude.
pub fn fl_all<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    Ok(fl_of(&valid_errors(pred, gt)?))
}

pub fn wauc<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    Ok(wauc_of(&valid_errors(pred, gt)?))
}

pub fn evaluate<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<MetricReport> {
    let errs = valid_errors(pred, gt)?;
    Ok(MetricReport {
        epe: epe_of(&errs),
        px1: px1_of(&errs),
        fl_all: fl_of(&errs),
        wauc: wauc_of(&errs),
        n_valid: errs.len(),
    })
}

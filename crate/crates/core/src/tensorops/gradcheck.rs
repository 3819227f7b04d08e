//! Central finite-difference checking of recorded backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::Tensor4;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    /// `max |analytic - fd| / max(1, |fd|)` over every checked entry.
    pub max_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `f` against central differences.
///
/// Non-scalar outputs are contracted with a fixed random cotangent so every
/// output entry contributes. `max_entries` caps how many entries of each
/// input are perturbed (chosen at random, seeded); `None` checks them all.
pub fn check_gradients<F>(
    inputs: &[Tensor4<f64>],
    f: F,
    step: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out);
    let cot = Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let eval = |xs: &[Tensor4<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g
            .value(out)
            .data()
            .iter()
            .zip(cot.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let grads = g.backward(out, cot.clone())?;
    let mut report = GradReport::default();
    let mut work: Vec<Tensor4<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zero = Tensor4::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        let idx: Vec<usize> = match max_entries {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = (a - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if err >= report.max_err {
                report.max_err = err;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = fd;
            }
        }
    }
    Ok(report)
}

//! Central finite-difference checking of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub input: usize,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
    pub rel_error: f64,
    pub max_abs_grad: f64,
}

/// Scalar of a closure rebuilt on a fresh tape.
fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

/// Checks every input of `f` with step `h`. `probe` caps how many entries of
/// each input are perturbed (evenly strided); `None` checks all of them.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], h: f64, probe: Option<usize>) -> Result<Vec<GradReport>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.take_or_zeros(vars[i]);
        let n = x.numel();
        let stride = probe.map_or(1, |p| (n / p.max(1)).max(1));
        let mut worst_diff = 0.0f64;
        let mut scale = 0.0f64;
        let mut perturbed = inputs.to_vec();
        for j in (0..n).step_by(stride) {
            let orig = x.data()[j];
            perturbed[i].data_mut()[j] = orig + h;
            let up = eval(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = orig - h;
            let down = eval(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        reports.push(GradReport {
            input: i,
            rel_error: if scale > 0.0 { worst_diff / scale } else { worst_diff },
            max_abs_grad: scale,
        });
    }
    Ok(reports)
}

/// Largest relative error over all inputs.
pub fn max_rel_error(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}

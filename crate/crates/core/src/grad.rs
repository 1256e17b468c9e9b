//! Gradient post-processing and numerical verification.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Clamps every gradient component to `[-bound, bound]`.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], bound: T) -> Result<()> {
    if !(bound > T::zero()) {
        return Err(Error::Config(format!("clip bound must be positive, got {bound}")));
    }
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v = v.max(-bound).min(bound);
        }
    }
    Ok(())
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat element index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub max_abs_error: f64,
    pub components: usize,
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the scalar objective at the given parameters and returns its
/// analytic gradient (one tensor per parameter). The relative error of a
/// component is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    finite_diff_check_with_floor(f, params, eps, 1e-8)
}

/// [`finite_diff_check`] with the relative-error denominator floored at
/// `floor` instead of `1e-8`. Components far below the round-off level of
/// the difference quotient cannot be resolved relatively.
pub fn finite_diff_check_with_floor<F>(mut f: F, params: &[Tensor<f64>], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    if !(eps > 0.0) || !(floor > 0.0) {
        return Err(Error::Config(format!("epsilon and floor must be positive, got {eps} and {floor}")));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::dim("finite_diff_check", (params.len(), 1), (analytic.len(), 1)));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        max_abs_error: 0.0,
        components: 0,
    };
    for p in 0..work.len() {
        if analytic[p].shape() != work[p].shape() {
            return Err(Error::dim("finite_diff_check", work[p].shape(), analytic[p].shape()));
        }
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (plus, _) = f(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let (minus, _) = f(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.components += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((p, i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

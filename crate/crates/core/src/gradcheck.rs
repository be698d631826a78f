//! Central-difference gradient checking.

use serde::Serialize;

use crate::error::{arg_err, Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param_errors: Vec<ParamError>,
}

/// Relative error `|a - n| / max(1, |a|, |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `f` at `theta` against central differences
/// over every coordinate.
///
/// `f` returns the scalar value and its analytic gradient.
pub fn gradcheck<F>(f: F, theta: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..theta.len()).collect();
    gradcheck_subset(f, theta, eps, &all)
}

/// Like [`gradcheck`] but only perturbs the listed coordinates.
pub fn gradcheck_subset<F>(mut f: F, theta: &[f64], eps: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return arg_err(format!("gradcheck epsilon {} outside (0, 1e-2]", eps));
    }
    let (v0, analytic) = f(theta);
    if !v0.is_finite() {
        return Err(Error::InvalidArgument("function is not finite at theta".into()));
    }
    if analytic.len() != theta.len() {
        return arg_err(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        ));
    }
    let mut point = theta.to_vec();
    let mut per_param_errors = Vec::with_capacity(indices.len());
    let mut max_rel_error: f64 = 0.0;
    for &i in indices {
        let orig = point[i];
        point[i] = orig + eps;
        let (plus, _) = f(&point);
        point[i] = orig - eps;
        let (minus, _) = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "function is not finite around parameter {}",
                i
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        max_rel_error = max_rel_error.max(rel_error(analytic[i], numeric));
        per_param_errors.push(ParamError {
            index: i,
            analytic: analytic[i],
            numeric,
        });
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param_errors,
    })
}

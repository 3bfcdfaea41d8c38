//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `(f(θ + h·eᵢ) - f(θ - h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!("finite difference step {h} must be > 0")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { what: "finite difference evaluation" });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst coordinate of an analytic-vs-numeric comparison for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub param_name: String,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn compare(param_name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
        let mut report = GradCheckReport {
            param_name: param_name.into(),
            max_rel_error: 0.0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            let e = relative_error(a, n);
            if e > report.max_rel_error || e.is_nan() {
                report.max_rel_error = e;
                report.analytic = a;
                report.numeric = n;
            }
        }
        report
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

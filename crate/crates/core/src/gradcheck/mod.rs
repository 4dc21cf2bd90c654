//! Central finite-difference verification of analytic gradients.

pub mod targets;

use crate::error::{invalid, Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Smallest denominator of the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

/// Gradient entries smaller than this many units of the central difference's
/// rounding resolution, `ε·max(|f|, 1) / eps`, are compared against that
/// bound instead of their own magnitude. A relative error of `1e-4` then means
/// agreement to about ten resolution units, the rounding noise observed on
/// structurally zero gradients of the attention block.
pub const RESOLUTION_MULTIPLE: f64 = 1e5;

pub const DEFAULT_EPS: f64 = 1e-5;

/// A scalar function of several flat inputs with an analytic gradient.
pub trait ScalarFunction: Sync {
    fn value(&self, inputs: &[Vec<f64>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Adapts a pair of closures to [`ScalarFunction`].
pub struct FnPair<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarFunction for FnPair<V, G>
where
    V: Fn(&[Vec<f64>]) -> Result<f64> + Sync,
    G: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn value(&self, inputs: &[Vec<f64>]) -> Result<f64> {
        (self.value)(inputs)
    }

    fn gradient(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        (self.gradient)(inputs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// `(input, entry)` of the worst disagreement.
    pub worst: (usize, usize),
    /// Analytic and numeric values at `worst`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Denominator floor used for this check.
    pub floor: f64,
    pub entries_checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a function whose value at the probe point is `f0`.
pub fn error_floor(f0: f64, eps: f64) -> f64 {
    (RESOLUTION_MULTIPLE * f64::EPSILON * f0.abs().max(1.0) / eps).max(ABS_FLOOR)
}

/// Compares every analytic gradient entry of `f` at `inputs` against the
/// central difference `(f(x + eps) − f(x − eps)) / 2eps`.
pub fn numeric_gradcheck<F: ScalarFunction>(f: &F, inputs: &[Vec<f64>], eps: f64) -> Result<GradcheckReport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid("numeric_gradcheck", format!("eps must be positive and finite, got {eps}"));
    }
    if inputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "numeric_gradcheck" });
    }
    let analytic = f.gradient(inputs)?;
    if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(g, x)| g.len() != x.len()) {
        return invalid("numeric_gradcheck", "analytic gradient does not match input shapes");
    }
    if analytic.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "numeric_gradcheck" });
    }

    let f0 = f.value(inputs)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite { op: "numeric_gradcheck" });
    }
    let floor = error_floor(f0, eps);

    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
        .collect();
    let errors: Vec<Result<(f64, f64)>> = entries
        .par_iter()
        .map(|&(i, j)| {
            let mut probe = inputs.to_vec();
            probe[i][j] = inputs[i][j] + eps;
            let plus = f.value(&probe)?;
            probe[i][j] = inputs[i][j] - eps;
            let minus = f.value(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "numeric_gradcheck" });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            Ok((relative_error(analytic[i][j], numeric, floor), numeric))
        })
        .collect();

    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        floor,
        entries_checked: entries.len(),
    };
    for (&(i, j), err) in entries.iter().zip(errors) {
        let (err, numeric) = err?;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (i, j);
            report.worst_analytic = analytic[i][j];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

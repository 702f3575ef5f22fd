//! Central finite-difference gradient checking in `f64`.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Label of the entry with the largest relative error.
    pub worst: String,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Compare paired analytic and numeric derivatives.
    pub fn from_pairs(pairs: &[(String, f64, f64)], tol: f64) -> Self {
        let mut report = GradCheckReport {
            checked: pairs.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: String::new(),
            tol,
            passed: true,
        };
        for (label, a, n) in pairs {
            let rel = relative_error(*a, *n);
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst = label.clone();
            }
        }
        report.passed = report.max_rel_err.is_finite() && report.max_rel_err <= tol;
        report
    }
}

/// `(f(x + eps) - f(x - eps)) / 2 eps` for a scalar function of one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, eps: f64) -> Result<f64> {
    let plus = f(x + eps)?;
    let minus = f(x - eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Check the tape gradient of a scalar function `f` at `x` against central
/// differences on every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.constant(input.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.param("x", x);
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get_or_zeros(&tape, xv);

    let mut pairs = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let numeric = central_difference(
            |v| {
                probe.data_mut()[i] = v;
                eval(&probe)
            },
            orig,
            eps,
        )?;
        probe.data_mut()[i] = orig;
        pairs.push((format!("x[{i}]"), analytic.data()[i], numeric));
    }
    Ok(GradCheckReport::from_pairs(&pairs, tol))
}

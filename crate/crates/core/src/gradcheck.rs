//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of the scalar built by `forward` against a
/// central difference `(f(p + eps) − f(p − eps)) / 2eps` on every coordinate
/// of every parameter. `forward` must be deterministic.
pub fn grad_check<F>(params: &ParamSet, eps: f64, forward: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let loss = forward(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic = bound.grads(&tape, params)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape)?;
        let loss = forward(&mut tape, &bound)?;
        Ok(tape.scalar(loss))
    };

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let original = probe.tensors()[p].data()[i];
            probe.tensors_mut()[p].data_mut()[i] = original + eps;
            let plus = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = original - eps;
            let minus = eval(&probe)?;
            probe.tensors_mut()[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad.data()[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(ParamId(p)).to_owned(), i));
            }
        }
    }
    Ok(report)
}

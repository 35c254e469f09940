//! Finite-difference verification of tape gradients.

use super::tape::{Precision, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Maximum over coordinates of `|analytic − numeric| / (|analytic| + eps)`,
/// where `numeric` is a fourth-order central difference with step `eps`.
///
/// `f` must build a `1x1` output from its input on the provided tape. All
/// evaluations run in double precision.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::with_precision(Precision::F64);
        let xv = tape.param(x.clone());
        let y = f(&tape, xv)?;
        tape.backward(y)?;
        xv.grad().expect("parameter leaf has a gradient")
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::with_precision(Precision::F64);
        let xv = tape.constant(t.clone());
        Ok(f(&tape, xv)?.item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let mut at = |delta: f64| -> Result<f64> {
            probe.data_mut()[i] = x0 + delta;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = x0;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + eps));
    }
    Ok(worst)
}

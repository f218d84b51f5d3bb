//! Central-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between the tape gradient of `f` at `input`
/// and a central difference with step `eps`.
///
/// Per coordinate the error is `|a − n| / max(1e-12, |a| + |n|)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check step must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let y = f(&mut tape, x)?;
        tape.backward(y)?;
        tape.grad_or_zeros(x)
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(
            analytic.data()[i],
            (up - down) / (2.0 * eps),
        ));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

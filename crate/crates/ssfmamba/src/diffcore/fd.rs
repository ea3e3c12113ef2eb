//! Central-difference gradient verification against the tape's backward pass.

use super::tape::{Tape, ValId};
use crate::diffcore::NdArray;
use crate::error::{Error, Result};

/// Compare backward() against central differences (f(x+h) - f(x-h)) / 2h on
/// every coordinate of every parameter and input leaf. Returns the worst
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
///
/// The tape is replayed twice per coordinate and restored afterwards.
pub fn finite_difference_check(tape: &mut Tape, out: ValId, step: f64) -> Result<f64> {
    finite_difference_check_filtered(tape, out, step, |_| true)
}

/// Same as `finite_difference_check` but only leaves whose name passes the
/// filter are perturbed.
pub fn finite_difference_check_filtered(
    tape: &mut Tape,
    out: ValId,
    step: f64,
    keep: impl Fn(&str) -> bool,
) -> Result<f64> {
    if tape.value(out).numel() != 1 {
        return Err(Error::Tape(format!(
            "finite_difference_check requires a scalar output, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Tape(format!("step must be positive, got {step}")));
    }
    let grads = tape.backward(out, &NdArray::scalar(1.0))?;
    let mut leaves: Vec<ValId> = Vec::new();
    for (name, id) in tape.param_ids().iter().chain(tape.input_ids()) {
        if keep(name) {
            leaves.push(*id);
        }
    }
    let mut worst = 0.0_f64;
    for id in leaves {
        let n = tape.value(id).numel();
        let analytic = grads.of(id).cloned();
        for i in 0..n {
            let saved = tape.get_value_raw(id, i);
            tape.set_value_raw(id, i, saved + step);
            tape.replay()?;
            let fp = tape.value(out).value();
            tape.set_value_raw(id, i, saved - step);
            tape.replay()?;
            let fm = tape.value(out).value();
            tape.set_value_raw(id, i, saved);
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    tape.replay()?;
    Ok(worst)
}

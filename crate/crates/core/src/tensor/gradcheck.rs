//! Central finite-difference oracle for tape gradients (f64 only).

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst mismatch found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Tolerances for one comparison: relative error below `rel`, or absolute
/// error below `abs_floor_err` whenever the analytic value is under `abs_floor`.
/// `step` is the relative finite-difference step.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs_floor: f64,
    pub abs_floor_err: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-4,
            rel: 1e-4,
            abs_floor: 1e-6,
            abs_floor_err: 1e-7,
        }
    }
}

impl Tolerance {
    pub fn rel(rel: f64) -> Self {
        Tolerance {
            rel,
            ..Default::default()
        }
    }

    pub fn with_step(self, step: f64) -> Self {
        Tolerance { step, ..self }
    }

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let abs = (analytic - numeric).abs();
        if analytic.abs() < self.abs_floor && abs < self.abs_floor_err {
            return true;
        }
        abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE) < self.rel
    }
}

/// Step used for element `x`: `step · max(1, |x|)`.
pub fn step_for(x: f64, step: f64) -> f64 {
    step * x.abs().max(1.0)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences. `max_per_input` caps how many elements of each input are
/// probed (evenly spread over the buffer); `None` probes all of them.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    tol: Tolerance,
    max_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient");
        let len = inputs[i].len();
        let count = max_per_input.map_or(len, |m| m.min(len));
        for j in 0..count {
            let e = if count == len { j } else { j * len / count };
            let x0 = inputs[i].data()[e];
            let h = step_for(x0, tol.step);
            probe[i].data_mut()[e] = x0 + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = x0 - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if a.abs().max(numeric.abs()) >= tol.abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
            if !tol.accepts(a, numeric) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

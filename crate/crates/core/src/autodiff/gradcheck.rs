//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_abs_err: f64,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// entries that also exceed the absolute tolerance.
    pub max_rel_err: f64,
    pub worst_excess: f64,
    pub checked: usize,
}

impl GradCheck {
    /// True when every entry satisfies
    /// `|a - n| <= max(rel_tol * max(|a|, |n|), abs_tol)`.
    pub fn passes(&self) -> bool {
        self.worst_excess <= 0.0
    }
}

/// Compares the tape gradient of `f` with respect to every input against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, rel_tol: f64, abs_tol: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        worst_excess: f64::NEG_INFINITY,
        ..GradCheck::default()
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs();
            let mag = a.abs().max(numeric.abs());
            let allowed = (rel_tol * mag).max(abs_tol);
            report.max_abs_err = report.max_abs_err.max(err);
            if err > abs_tol && mag > 0.0 {
                report.max_rel_err = report.max_rel_err.max(err / mag);
            }
            report.worst_excess = report.worst_excess.max(err - allowed);
            report.checked += 1;
        }
    }
    if report.checked == 0 {
        report.worst_excess = 0.0;
    }
    Ok(report)
}

//! Central finite-difference gradient checking.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` receives a fresh tape and the differentiable leaf holding `x`, and
/// must return a one-element node.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let analytic = tape.backward(root)?.wrt(leaf);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let r = f(&mut t, v)?;
        t.scalar(r)
    };

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Central-difference gradient of a plain scalar function.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    out
}

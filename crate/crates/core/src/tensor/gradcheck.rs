//! Central finite-difference check for backward rules.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Outcome of comparing autodiff against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error used throughout: `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function with
/// `(f(x + h) − f(x − h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and the id of `x` registered as a parameter,
/// and must return the id of a one-element output.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::Argument(format!("finite-difference step {step} outside [1e-6, 1e-4]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(t.clone());
        let out = f(&mut tape, id)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::shape("grad_check", format!("output shape {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let id = tape.param(x.clone());
    let out = f(&mut tape, id)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(id, &tape).into_data();

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite(format!("grad_check coordinate {i}")));
        }
        let e = relative_error(*a, *n);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

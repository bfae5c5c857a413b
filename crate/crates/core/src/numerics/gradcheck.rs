use super::{Tape, Tensor, Var};
use crate::error::{MaatError, Result};

/// Denominator floor of [`relative_error`]: below this magnitude the
/// comparison degrades gracefully to an absolute one.
const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the largest relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(MaatError::Contract(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(MaatError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe)?;
        let o = f(&mut t, v)?;
        Ok(t.value(o).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

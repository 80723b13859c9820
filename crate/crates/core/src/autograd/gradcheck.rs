//! Central-difference gradient oracle.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Perturbation applied to each checked element.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Flat indices to check; `None` checks every element.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-6,
            coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)` over
    /// the checked elements; zero when both gradients vanish.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
}

fn eval(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x, false);
    let out = f(&mut tape, v)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(value)
}

/// Compare the tape gradient of the scalar function `f` at `x` with central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn gradcheck<F>(f: F, x: &Tensor, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).map(Tensor::into_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..x.len()).collect(),
    };
    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    for &i in &coords {
        if i >= x.len() {
            return Err(Error::InvalidArgument(format!(
                "gradcheck: coordinate {i} out of range for {} elements",
                x.len()
            )));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.eps;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * opts.eps);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        max_abs = max_abs.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    let max_rel_error = if scale > 0.0 { max_abs / scale } else { 0.0 };
    Ok(GradcheckReport {
        max_rel_error,
        max_abs_error: max_abs,
        checked: coords.len(),
        passed: max_rel_error < opts.tol,
    })
}

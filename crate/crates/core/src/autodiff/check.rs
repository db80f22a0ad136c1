//! Central-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_entry: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_ERROR_FLOOR.max(analytic.abs() + numeric.abs())
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::dim("grad_check", "function must return a 1x1 value"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            context: "objective evaluation".into(),
        });
    }
    Ok(v)
}

/// Compares the tape's gradient of `f` at `params` with central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs positive step and tolerance (step={step}, tol={tol})"
        )));
    }
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_entry: 0,
        };
        for k in 0..grad.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[k];
            let rel = relative_error(a, numeric);
            worst.max_abs_error = worst.max_abs_error.max((a - numeric).abs());
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_entry = k;
            }
        }
        reports.push(worst);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error <= tol,
    })
}

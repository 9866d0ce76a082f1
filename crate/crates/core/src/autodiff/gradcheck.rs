//! Central finite-difference checks against the tape's analytic gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over components of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// Label of the component reaching the max (e.g. `"x[3]"`).
    pub worst: String,
    pub checked: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.rel_tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, root: Var, what: &str) -> Result<f64, TensorError> {
    let v = tape.value(root).item().ok_or_else(|| TensorError::NonScalarRoot(tape.shape(root).to_vec()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite { value: v, location: what.to_string() })
    }
}

/// Checks `d f(x) / d x` for a scalar-valued `f` built on a fresh tape.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, step: f64, rel_tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")).into());
    }
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let root = f(&mut tape, xv)?;
    eval_scalar(&tape, root, "f(x)")?;
    tape.backward(root)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval_at = |point: Tensor, i: usize| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let r = f(&mut t, v)?;
        Ok(eval_scalar(&t, r, &format!("f(x ± h e_{i})"))?)
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked: 0, rel_tol };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(plus, i)? - eval_at(minus, i)?) / (2.0 * step);
        let e = rel_err(analytic.data()[i], numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = e;
            report.worst = format!("x[{i}]");
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar loss with respect to stored parameters.
///
/// At most `max_per_param` coordinates per parameter are probed, spread
/// evenly across the tensor. Frozen parameters are skipped.
pub fn finite_diff_check_params<F, E>(
    store: &mut ParamStore,
    f: F,
    ids: &[ParamId],
    step: f64,
    rel_tol: f64,
    max_per_param: usize,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")).into());
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    eval_scalar(&tape, root, "loss")?;
    tape.backward(root)?;
    store.accumulate_grads(&tape);
    drop(tape);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked: 0, rel_tol };
    for &id in ids {
        if store.get(id).frozen {
            continue;
        }
        let n = store.get(id).value.numel();
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        let probes = max_per_param.min(n).max(1);
        for p in 0..probes {
            let i = p * n / probes;
            let orig = store.get(id).value.data()[i];
            let mut eval_shift = |delta: f64| -> Result<f64, E> {
                store.get_mut(id).value.data_mut()[i] = orig + delta;
                let mut t = Tape::new();
                let r = f(&mut t, store)?;
                let name = &store.get(id).name;
                Ok(eval_scalar(&t, r, &format!("{name}[{i}]"))?)
            };
            let fp = eval_shift(step);
            let fm = eval_shift(-step);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * step);
            let e = rel_err(analytic.data()[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]", store.get(id).name);
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

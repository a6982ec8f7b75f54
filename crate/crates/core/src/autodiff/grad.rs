use serde::Serialize;

use super::{Bound, ParamVector, Tape};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::objectives::{evaluate_spec, objective_tape, Batch, ObjectiveOptions, ObjectiveSpec, ObjectiveValue};

/// Denominator floor of the relative error used by [`compare`].
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Value and reverse-mode gradient of `model`'s family objective.
pub fn gradient(model: &Model, batch: &Batch, opts: &ObjectiveOptions) -> Result<(ObjectiveValue, ParamVector)> {
    gradient_spec(model, batch, &ObjectiveSpec::for_model(model, batch.len(), opts))
}

/// Value and reverse-mode gradient of a fully specified objective.
pub fn gradient_spec(model: &Model, batch: &Batch, spec: &ObjectiveSpec) -> Result<(ObjectiveValue, ParamVector)> {
    let tape = Tape::new();
    let blocks = model.blocks();
    let bound = Bound::new(&tape, &blocks, true);
    let v = objective_tape(model, &tape, &bound, batch, spec)?;
    let value = ObjectiveValue {
        total: v.total.item(),
        data_term: v.data.item(),
        kl_term: v.kl.item(),
        n_scale: v.n_scale,
    };
    if !value.total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = tape.backward(v.total);
    let g = bound.collect(&grads, &blocks);
    if let Some(i) = g.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { param: g.names[i].clone() });
    }
    Ok((value, g))
}

/// Central finite differences with step `1e-5 * (1 + |theta|)`. Entries
/// outside `subset` are left at zero.
pub fn finite_difference_gradient(model: &Model, batch: &Batch, spec: &ObjectiveSpec, subset: Option<&[usize]>) -> Result<ParamVector> {
    let base = model.params();
    let all: Vec<usize> = (0..base.len()).collect();
    let idx = subset.unwrap_or(&all);
    let mut out = vec![0.0; base.len()];
    for &k in idx {
        let theta = base.values[k];
        let h = 1e-5 * (1.0 + theta.abs());
        let eval = |t: f64| -> Result<f64> {
            let mut vals = base.values.clone();
            vals[k] = t;
            let m = model.with_params(&base.with_values(vals))?;
            Ok(evaluate_spec(&m, batch, spec)?.total)
        };
        out[k] = (eval(theta + h)? - eval(theta - h)?) / (2.0 * h);
    }
    Ok(base.with_values(out))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Largest `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)` over `subset`.
pub fn compare(analytic: &ParamVector, numeric: &ParamVector, subset: Option<&[usize]>) -> FdReport {
    let all: Vec<usize> = (0..analytic.len()).collect();
    let idx = subset.unwrap_or(&all);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: idx.len(),
    };
    for &k in idx {
        let (a, n) = (analytic.values[k], numeric.values[k]);
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        if err > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = err;
            report.worst_param = analytic.names[k].clone();
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

/// Analytic against finite-difference gradient of the same seeded objective.
pub fn fd_check(model: &Model, batch: &Batch, opts: &ObjectiveOptions, subset: Option<&[usize]>) -> Result<FdReport> {
    let spec = ObjectiveSpec::for_model(model, batch.len(), opts);
    let (_, analytic) = gradient_spec(model, batch, &spec)?;
    let numeric = finite_difference_gradient(model, batch, &spec, subset)?;
    Ok(compare(&analytic, &numeric, subset))
}

//! Central finite-difference checks of tape gradients in 64-bit precision.

use std::fmt;

use ndarray::ArrayD;

use super::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Gradients with magnitude below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Label of the entry with the largest error.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entries, max rel err {:.3e} at {}",
            self.checked, self.max_rel_err, self.worst
        )
    }
}

fn scalar(g: &Graph<'_, f64>, v: Var) -> f64 {
    g.value(v).iter().copied().sum()
}

/// Checks the gradient of `f` with respect to every element of `inputs`.
pub fn check_inputs<F>(inputs: &[ArrayD<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    check_inputs_in(None, inputs, step, f)
}

/// [`check_inputs`] on graphs bound to a parameter store.
pub fn check_inputs_in<F>(
    store: Option<&ParamStore<f64>>,
    inputs: &[ArrayD<f64>],
    step: f64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[ArrayD<f64>], grad: bool| -> Result<(f64, Vec<ArrayD<f64>>)> {
        let mut g = match store {
            Some(s) => Graph::with_params(s),
            None => Graph::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let grads = if grad {
            let gr = g.backward(loss)?;
            vars.iter().map(|&v| gr.wrt(v).cloned().expect("leaf gradient")).collect()
        } else {
            Vec::new()
        };
        Ok((scalar(&g, loss), grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradReport::default();
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k].as_slice().expect("standard layout")[i];
            work[k].as_slice_mut().expect("standard layout")[i] = orig + step;
            let (up, _) = eval(&work, false)?;
            work[k].as_slice_mut().expect("standard layout")[i] = orig - step;
            let (dn, _) = eval(&work, false)?;
            work[k].as_slice_mut().expect("standard layout")[i] = orig;
            let numeric = (up - dn) / (2.0 * step);
            let a = analytic[k].as_slice().expect("standard layout")[i];
            report.record(|| format!("input {k}[{i}]"), a, numeric);
        }
    }
    Ok(report)
}

/// Checks selected parameter entries `(param, flat index)`. `f` builds the
/// loss on a graph bound to the store; `adjust` may rewrite the analytic
/// gradients before comparison (used to demonstrate that a corrupted
/// backward is caught).
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    picks: &[(ParamId, usize)],
    step: f64,
    f: F,
    adjust: impl FnOnce(&mut Vec<ArrayD<f64>>),
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut analytic = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let grads: Gradients<f64> = g.backward(loss)?;
        grads.into_params()
    };
    adjust(&mut analytic);
    let mut report = GradReport::default();
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        Ok(scalar(&g, loss))
    };
    for &(id, i) in picks {
        let orig = store.value(id).as_slice().expect("standard layout")[i];
        store.value_mut(id).as_slice_mut().expect("standard layout")[i] = orig + step;
        let up = eval(store)?;
        store.value_mut(id).as_slice_mut().expect("standard layout")[i] = orig - step;
        let dn = eval(store)?;
        store.value_mut(id).as_slice_mut().expect("standard layout")[i] = orig;
        let numeric = (up - dn) / (2.0 * step);
        let a = analytic[id.index()].as_slice().expect("standard layout")[i];
        report.record(|| format!("{}[{i}]", store.get(id).name), a, numeric);
    }
    Ok(report)
}

/// Up to `per_param` evenly spaced entries of every parameter.
pub fn spread_picks(store: &ParamStore<f64>, per_param: usize) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| {
            let n = p.value.len();
            let k = per_param.min(n);
            (0..k).map(move |j| (id, j * n / k.max(1)))
        })
        .collect()
}

//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Largest relative discrepancy between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, over every parameter entry of `store`.
///
/// The relative error of one entry is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_filtered(store, eps, |_| true, f)
}

/// Like [`grad_check`], restricted to parameters whose name passes `keep`.
pub fn grad_check_filtered<F, K>(store: &ParamStore<f64>, eps: f64, keep: K, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
    K: Fn(&str) -> bool,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        let v = g.value(out)?;
        if v.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        if g.value(out)?.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.value(out)?.shape()
            )));
        }
        g.backward(out)?.params(store)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let name = &store.param(id).name;
        if !keep(name) {
            continue;
        }
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

//! Central finite-difference verification of backpropagated gradients.

use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Compares the gradient returned by `loss_fn` against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` over every trainable coordinate.
pub fn grad_check<F>(params: &ParamSet<f64>, epsilon: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<(f64, Grads<f64>)>,
{
    let (loss, grads) = loss_fn(params)?;
    check_against(params, &grads, loss, epsilon, |p: &ParamSet<f64>| loss_fn(p).map(|(l, _)| l))
}

/// Like [`grad_check`], but the difference quotients come from `reference`,
/// the same loss evaluated in a wider scalar type `R`. Roundoff in the
/// quotient then stays far below the comparison floor, which matters for
/// coordinates whose exact gradient is zero.
pub fn grad_check_with_reference<R, F, G>(params: &ParamSet<f64>, epsilon: f64, analytic: F, reference: G) -> Result<GradCheckReport>
where
    R: Scalar,
    F: FnOnce(&ParamSet<f64>) -> Result<(f64, Grads<f64>)>,
    G: FnMut(&ParamSet<R>) -> Result<R>,
{
    let (loss, grads) = analytic(params)?;
    check_against(&params.cast::<R>(), &grads, loss, epsilon, reference)
}

fn check_against<R, G>(params: &ParamSet<R>, grads: &Grads<f64>, loss: f64, epsilon: f64, mut eval: G) -> Result<GradCheckReport>
where
    R: Scalar,
    G: FnMut(&ParamSet<R>) -> Result<R>,
{
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("grad check aborted: loss is {loss} at the base point")));
    }
    let eps = R::lit(epsilon);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, _, e)| e.trainable())
        .map(|(id, name, e)| (id, name.to_string(), e.tensor.len()))
        .collect();
    for (id, name, len) in ids {
        for i in 0..len {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad check aborted: non-finite loss perturbing {name}[{i}]"
                )));
            }
            let numeric = ((up - down) / (eps + eps)).as_f64();
            let analytic = grads.get(id).data()[i];
            let e = rel_error(analytic, numeric);
            report.coordinates += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

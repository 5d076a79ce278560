//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst coordinate found by [`grad_check_inputs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    /// (input position, flat coordinate) of the worst error.
    pub worst: (usize, usize),
    pub analytic: T,
    pub numeric: T,
}

fn eval_scalar<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::Contract("grad_check: function must return a scalar".into()))
}

/// Compares the analytic gradient of scalar `f` with central differences for
/// every coordinate of every input.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_inputs<T: Scalar, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let floor = T::of(1e-8);
    let two_eps = eps + eps;
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: (0, 0),
        analytic: T::zero(),
        numeric: T::zero(),
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (pos, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![T::zero(); inputs[pos].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[pos].data()[i];
            probe[pos].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[pos].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[pos].data_mut()[i] = orig;
            let numeric = (plus - minus) / two_eps;
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::GradCheck {
                    index: i,
                    analytic: a.as_f64(),
                    numeric: numeric.as_f64(),
                });
            }
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (pos, i),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_inputs`]; returns the maximum relative
/// error.
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps).map(|r| r.max_rel_error)
}

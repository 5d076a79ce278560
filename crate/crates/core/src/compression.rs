//! Mean-centred compression operator and its three compression functions.
//!
//! Every activation in a group is pulled toward the group mean:
//! `out_i = mu + sign(x_i - mu) * f(|x_i - mu|)` where `f` is one of
//!
//! | kind | `f(r)`            | `f'(r)`                  |
//! |------|-------------------|--------------------------|
//! | S    | `r / lambda`      | `1 / lambda`             |
//! | L    | `ln(1 + r/lambda)`| `1 / (lambda + r)`       |
//! | T    | `tanh(r/lambda)`  | `sech^2(r/lambda)/lambda`|
//!
//! All three satisfy `0 <= f(r) <= r / lambda`, which is a non-expansion of
//! deviations when `lambda >= 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compression function family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompressionKind {
    /// Linear.
    S,
    /// Logarithmic.
    L,
    /// Hyperbolic tangent.
    T,
}

impl CompressionKind {
    pub const ALL: [CompressionKind; 3] = [CompressionKind::S, CompressionKind::L, CompressionKind::T];
}

impl fmt::Display for CompressionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CompressionKind::S => "S",
            CompressionKind::L => "L",
            CompressionKind::T => "T",
        };
        f.write_str(s)
    }
}

impl FromStr for CompressionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S" | "LINEAR" => Ok(CompressionKind::S),
            "L" | "LOG" | "LOGARITHMIC" => Ok(CompressionKind::L),
            "T" | "TANH" => Ok(CompressionKind::T),
            other => Err(Error::Config(format!("unknown compression kind `{other}`"))),
        }
    }
}

/// Validated compression configuration for one normalization group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionParams {
    pub kind: CompressionKind,
    pub lambda: f64,
    pub group_size: usize,
    /// Set when `lambda < 1`, where the deviation bound no longer implies
    /// non-expansion.
    pub uncertified: bool,
}

impl CompressionParams {
    pub fn new(kind: CompressionKind, lambda: f64, group_size: usize) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("compression strength must be positive, got {lambda}")));
        }
        if group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        let uncertified = lambda < 1.0;
        if uncertified {
            log::warn!("compression strength {lambda} < 1: outside the certified non-expansive regime");
        }
        Ok(Self {
            kind,
            lambda,
            group_size,
            uncertified,
        })
    }
}

#[inline]
pub(crate) fn f_lambda_unchecked<T: Scalar>(kind: CompressionKind, r: T, lambda: T) -> T {
    let x = r / lambda;
    // ln(1+x) <= x and tanh(x) <= x hold exactly; the min absorbs libm's
    // last-ulp rounding near zero so the bound also holds in floating point.
    match kind {
        CompressionKind::S => x,
        CompressionKind::L => x.ln_1p().min(x),
        CompressionKind::T => x.tanh().min(x),
    }
}

#[inline]
pub(crate) fn f_lambda_derivative_unchecked<T: Scalar>(kind: CompressionKind, r: T, lambda: T) -> T {
    match kind {
        CompressionKind::S => T::one() / lambda,
        CompressionKind::L => T::one() / (lambda + r),
        CompressionKind::T => {
            let t = (r / lambda).tanh();
            (T::one() - t * t) / lambda
        }
    }
}

fn check_lambda<T: Scalar>(lambda: T) -> Result<()> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::Contract(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Evaluates the compression function at a nonnegative deviation `r`.
pub fn f_lambda<T: Scalar>(kind: CompressionKind, r: T, lambda: T) -> Result<T> {
    check_lambda(lambda)?;
    if !(r >= T::zero()) {
        return Err(Error::Contract(format!("deviation must be nonnegative, got {r}")));
    }
    Ok(f_lambda_unchecked(kind, r, lambda))
}

/// Derivative of the compression function at a nonnegative deviation `r`.
pub fn f_lambda_derivative<T: Scalar>(kind: CompressionKind, r: T, lambda: T) -> Result<T> {
    check_lambda(lambda)?;
    if !(r >= T::zero()) {
        return Err(Error::Contract(format!("deviation must be nonnegative, got {r}")));
    }
    Ok(f_lambda_derivative_unchecked(kind, r, lambda))
}

/// Supremum of `f(r) / r`, equal to `1 / lambda` for every kind.
pub fn compression_ratio<T: Scalar>(_kind: CompressionKind, lambda: T) -> Result<T> {
    check_lambda(lambda)?;
    Ok(T::one() / lambda)
}

/// First grid point where `0 <= f(r) <= alpha * r` fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation<T> {
    pub r: T,
    pub value: T,
    pub bound: T,
}

/// Checks `0 <= f(r) <= r / lambda` on every grid point, returning the first
/// witness of a violation.
pub fn certify_bounded<T: Scalar>(
    kind: CompressionKind,
    lambda: T,
    grid: &[T],
) -> Result<Option<BoundViolation<T>>> {
    check_lambda(lambda)?;
    for &r in grid {
        let value = f_lambda(kind, r, lambda)?;
        let bound = r / lambda;
        if !(value >= T::zero() && value <= bound) {
            return Ok(Some(BoundViolation { r, value, bound }));
        }
    }
    Ok(None)
}

/// Returns `f'(r)` after asserting it does not exceed the compression ratio.
///
/// Only defined for `lambda >= 1`; a value above `1 / lambda` means the
/// derivative rule is broken.
pub fn deviation_jacobian_bound<T: Scalar>(kind: CompressionKind, lambda: T, r: T) -> Result<T> {
    if !(lambda >= T::one()) {
        return Err(Error::Contract(format!("jacobian bound needs lambda >= 1, got {lambda}")));
    }
    let d = f_lambda_derivative(kind, r, lambda)?;
    let alpha = T::one() / lambda;
    if !(d >= T::zero() && d <= alpha) {
        return Err(Error::Numeric(format!(
            "f'({r}) = {d} exceeds 1/lambda = {alpha} for kind {kind}"
        )));
    }
    Ok(d)
}

/// Compresses one group eagerly (no graph).
pub fn compress_slice<T: Scalar>(x: &[T], params: &CompressionParams) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Contract("compress: empty slice".into()));
    }
    if x.len() != params.group_size {
        return Err(Error::Contract(format!(
            "compress: slice length {} != group size {}",
            x.len(),
            params.group_size
        )));
    }
    let lambda = T::of(params.lambda);
    let mu = x.iter().copied().sum::<T>() / T::of_usize(x.len());
    Ok(x
        .iter()
        .map(|&v| {
            let d = v - mu;
            mu + crate::autodiff::graph::sign_of(d) * f_lambda_unchecked(params.kind, d.abs(), lambda)
        })
        .collect())
}

/// Records compression of every last-axis group of `x` on the graph.
///
/// The group mean stays on the graph, so gradients include its dependence on
/// every member of the group.
pub fn compress<T: Scalar>(g: &mut Graph<T>, x: Var, params: &CompressionParams) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let Some(&h) = shape.last() else {
        return Err(Error::Contract("compress: rank-0 input".into()));
    };
    if h == 0 {
        return Err(Error::Contract("compress: empty slice".into()));
    }
    if h != params.group_size {
        return Err(Error::Contract(format!(
            "compress: last axis {h} != group size {}",
            params.group_size
        )));
    }
    let axis = shape.len() - 1;
    let mu = g.mean_axis(x, axis, true)?;
    let mu = g.broadcast(mu, shape)?;
    let dev = g.sub(x, mu)?;
    let squeezed = g.signed_compress(dev, params.kind, T::of(params.lambda))?;
    g.add(mu, squeezed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn log_grid(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 10f64.powf(-6.0 + 9.0 * i as f64 / (n - 1) as f64))
            .collect()
    }

    #[test]
    fn f_lambda_examples() {
        assert_eq!(f_lambda(CompressionKind::T, 0.0, 4.0).unwrap(), 0.0);
        assert_eq!(f_lambda(CompressionKind::S, 8.0, 4.0).unwrap(), 2.0);
        // ratio f(r)/r tends to 1/lambda as r -> 0
        let r = 1e-9;
        assert_relative_eq!(f_lambda(CompressionKind::L, r, 4.0).unwrap() / r, 0.25, max_relative = 1e-8);
    }

    #[test]
    fn negative_deviation_is_rejected() {
        assert!(matches!(f_lambda(CompressionKind::L, -1.0, 2.0), Err(Error::Contract(_))));
        assert!(matches!(f_lambda(CompressionKind::L, 1.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn ratio_is_inverse_strength() {
        assert_eq!(compression_ratio(CompressionKind::L, 4.0).unwrap(), 0.25);
        assert_eq!(compression_ratio(CompressionKind::S, 1.0).unwrap(), 1.0);
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 * 0.1).collect();
        assert_eq!(certify_bounded(CompressionKind::T, 2.0, &grid).unwrap(), None);
        for &r in &grid {
            assert!((r / 2.0).tanh() <= r / 2.0);
        }
    }

    #[test]
    fn jacobian_bound_examples() {
        assert_eq!(deviation_jacobian_bound(CompressionKind::S, 4.0, 123.0).unwrap(), 0.25);
        assert_eq!(deviation_jacobian_bound(CompressionKind::L, 4.0, 4.0).unwrap(), 0.125);
        assert_eq!(deviation_jacobian_bound(CompressionKind::T, 1.0, 0.0).unwrap(), 1.0);
        assert!(deviation_jacobian_bound(CompressionKind::T, 0.5, 1.0).is_err());
    }

    #[test]
    fn bounded_and_monotone_on_log_grid() {
        let grid = log_grid(400);
        for kind in CompressionKind::ALL {
            for lambda in [1.0, 1.5, 2.0, 4.0, 8.0, 100.0] {
                assert_eq!(certify_bounded(kind, lambda, &grid).unwrap(), None, "{kind} {lambda}");
                let vals: Vec<f64> = grid.iter().map(|&r| f_lambda(kind, r, lambda).unwrap()).collect();
                assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{kind} {lambda} not monotone");
            }
        }
    }

    #[test]
    fn compress_examples() {
        let p = CompressionParams::new(CompressionKind::S, 4.0, 3).unwrap();
        assert_eq!(compress_slice(&[0.0, 4.0, -4.0], &p).unwrap(), vec![0.0, 1.0, -1.0]);
        let p = CompressionParams::new(CompressionKind::T, 4.0, 3).unwrap();
        let out = compress_slice(&[0.0, 4.0, -4.0], &p).unwrap();
        assert_eq!(out[0], 0.0);
        assert_relative_eq!(out[1], 1f64.tanh(), max_relative = 1e-15);
        assert_relative_eq!(out[1], 0.7616, epsilon = 1e-4);
        assert_eq!(out[2], -out[1]);
        for kind in CompressionKind::ALL {
            let p = CompressionParams::new(kind, 0.7, 3).unwrap();
            assert_eq!(compress_slice(&[2.5, 2.5, 2.5], &p).unwrap(), vec![2.5; 3]);
        }
    }

    #[test]
    fn compress_contract_errors() {
        let p = CompressionParams::new(CompressionKind::S, 4.0, 3).unwrap();
        assert!(compress_slice::<f64>(&[], &p).is_err());
        assert!(compress_slice(&[1.0, 2.0], &p).is_err());
        assert!(CompressionParams::new(CompressionKind::S, -1.0, 3).is_err());
        assert!(CompressionParams::new(CompressionKind::S, 1.0, 0).is_err());
        assert!(CompressionParams::new(CompressionKind::L, 0.5, 3).unwrap().uncertified);
        assert!(!CompressionParams::new(CompressionKind::L, 1.0, 3).unwrap().uncertified);
    }

    #[test]
    fn graph_compress_matches_eager() {
        let p = CompressionParams::new(CompressionKind::L, 2.0, 4).unwrap();
        let x = vec![0.3, -1.2, 2.5, 0.1, 1.0, 1.0, 1.0, 5.0];
        let mut g = Graph::new();
        let v = g.constant(crate::autodiff::Tensor::new(vec![2, 4], x.clone()).unwrap());
        let out = compress(&mut g, v, &p).unwrap();
        let mut eager = compress_slice(&x[..4], &p).unwrap();
        eager.extend(compress_slice(&x[4..], &p).unwrap());
        for (a, b) in g.value(out).data().iter().zip(&eager) {
            assert_relative_eq!(*a, *b, max_relative = 1e-15);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("t".parse::<CompressionKind>().unwrap(), CompressionKind::T);
        assert_eq!("log".parse::<CompressionKind>().unwrap(), CompressionKind::L);
        assert!("q".parse::<CompressionKind>().is_err());
    }
}

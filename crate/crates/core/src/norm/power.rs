//! Branchwise power transform and maximum-likelihood estimation of its
//! exponent.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default search interval for the exponent estimate.
pub const LAMBDA_SEARCH_RANGE: (f64, f64) = (-2.0, 4.0);
/// Golden-section iterations for the exponent estimate.
pub const LAMBDA_SEARCH_ITERS: usize = 30;

/// Transform of a single value.
///
/// ```text
/// x >= 0, l != 0:  ((x + 1)^l - 1) / l
/// x >= 0, l == 0:  ln(x + 1)
/// x <  0, l != 2: -((1 - x)^(2 - l) - 1) / (2 - l)
/// x <  0, l == 2: -ln(1 - x)
/// ```
/// The power branches are evaluated as `expm1(p * ln1p(|x|)) / p`, which is
/// algebraically identical and keeps precision near the log branches.
#[inline]
pub fn power_value<T: Scalar>(x: T, lambda: T) -> T {
    let two = T::of(2.0);
    if x >= T::zero() {
        if lambda == T::zero() {
            x.ln_1p()
        } else {
            (lambda * x.ln_1p()).exp_m1() / lambda
        }
    } else {
        let p = two - lambda;
        if p == T::zero() {
            -(-x).ln_1p()
        } else {
            -(p * (-x).ln_1p()).exp_m1() / p
        }
    }
}

/// `d/dx` of [`power_value`]: `(1 + x)^(l - 1)` for `x >= 0` and
/// `(1 - x)^(1 - l)` otherwise.
#[inline]
pub fn power_transform_derivative<T: Scalar>(x: T, lambda: T) -> T {
    if x >= T::zero() {
        ((lambda - T::one()) * x.ln_1p()).exp()
    } else {
        ((T::one() - lambda) * (-x).ln_1p()).exp()
    }
}

/// Applies the transform elementwise; a non-finite result is reported with its
/// coordinate.
pub fn power_transform<T: Scalar>(c: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    if !lambda.is_finite() {
        return Err(Error::Contract(format!("power transform exponent must be finite, got {lambda}")));
    }
    let mut out = c.map(|x| power_value(x, lambda));
    if let Some(index) = out.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Saturation {
            index,
            input: c.data()[index].as_f64(),
        });
    }
    out.set_requires_grad(false);
    Ok(out)
}

/// Profile Gaussian log-likelihood of the transformed sample.
///
/// `-n/2 ln(var(g(x))) + (l - 1) * sum(sign(x) ln(1 + |x|))`
pub fn power_log_likelihood<T: Scalar>(data: &[T], lambda: T) -> T {
    let n = T::of_usize(data.len());
    let transformed: Vec<T> = data.iter().map(|&x| power_value(x, lambda)).collect();
    let mean = transformed.iter().copied().sum::<T>() / n;
    let var = transformed.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let jacobian: T = data
        .iter()
        .map(|&x| {
            let s = if x >= T::zero() { T::one() } else { -T::one() };
            s * x.abs().ln_1p()
        })
        .sum();
    -n / T::of(2.0) * var.ln() + (lambda - T::one()) * jacobian
}

/// Maximum-likelihood exponent over `[lo, hi]` by golden-section search.
pub fn estimate_power_lambda<T: Scalar>(data: &[T], lo: f64, hi: f64, iters: usize) -> Result<T> {
    if data.len() < 2 {
        return Err(Error::Numeric("power exponent estimate needs at least 2 values".into()));
    }
    let phi = T::of((5f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (T::of(lo), T::of(hi));
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = power_log_likelihood(data, c);
    let mut fd = power_log_likelihood(data, d);
    for _ in 0..iters {
        if !(fc.is_finite() && fd.is_finite()) {
            return Err(Error::Numeric(format!("non-finite likelihood near lambda {c} / {d}")));
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = power_log_likelihood(data, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = power_log_likelihood(data, d);
        }
    }
    let est = (a + b) / T::of(2.0);
    if !est.is_finite() {
        return Err(Error::Numeric("power exponent estimate diverged".into()));
    }
    Ok(est)
}

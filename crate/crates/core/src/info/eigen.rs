//! Cyclic Jacobi eigenvalue iteration for small dense symmetric matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 64;

/// Eigenvalues of the symmetric `n x n` row-major matrix `a`, ascending.
///
/// Only the upper triangle's mirror is assumed consistent; callers should
/// symmetrize first. Converges once the off-diagonal norm is below
/// `n * eps * ||A||_F`. Fails when the iteration does not converge, reporting the
/// remaining off-diagonal mass.
pub fn symmetric_eigenvalues<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    if a.len() != n * n {
        return Err(Error::Contract(format!("eigen: {} entries for a {n}x{n} matrix", a.len())));
    }
    if let Some(i) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("eigen: non-finite entry at ({}, {})", i / n, i % n)));
    }
    let mut m = a.to_vec();
    let fro = m.iter().map(|&v| v * v).sum::<T>().sqrt();
    let tol = T::epsilon() * fro * T::of_usize(n.max(1));
    let off_diag = |m: &[T]| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let half = T::of(0.5);
    let huge = T::of(1e150);
    let mut converged = fro.is_zero();
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        if off_diag(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) * half / apq;
                let t = if theta.abs() > huge {
                    half / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    if !converged && off_diag(&m) > tol {
        return Err(Error::Numeric(format!(
            "eigen: Jacobi did not converge after {MAX_SWEEPS} sweeps (off-diagonal {} vs Frobenius {})",
            off_diag(&m),
            fro
        )));
    }
    let mut eig: Vec<T> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

use crate::error::{Error, Result};

/// `psi(n) - psi(k)` for integers `n >= k >= 1`.
fn digamma_difference(n: usize, k: usize) -> f64 {
    (k..n).map(|j| 1.0 / j as f64).sum()
}

/// Kozachenko–Leonenko k-nearest-neighbour estimate of the differential
/// entropy (nats) of a 1-D sample.
///
/// `H = psi(N) - psi(k) + ln 2 + mean(ln eps_i)` with `eps_i` the distance to
/// the k-th neighbour. Exact ties make the estimate diverge and are rejected.
pub fn knn_entropy(samples: &[f64], k: usize) -> Result<f64> {
    let n = samples.len();
    if k == 0 || n <= k {
        return Err(Error::Contract(format!("knn entropy needs 1 <= k < n, got k = {k}, n = {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("knn entropy samples must be finite".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mut log_sum = 0.0;
    for i in 0..n {
        // Merge the neighbours to the left and right until k are taken.
        let (mut l, mut r) = (i, i);
        let mut dist = 0.0;
        for _ in 0..k {
            let dl = if l > 0 { s[i] - s[l - 1] } else { f64::INFINITY };
            let dr = if r + 1 < n { s[r + 1] - s[i] } else { f64::INFINITY };
            if dl <= dr {
                l -= 1;
                dist = dl;
            } else {
                r += 1;
                dist = dr;
            }
        }
        if !(dist > 0.0) {
            return Err(Error::Estimation(format!("knn entropy: duplicate value {} in sample", s[i])));
        }
        log_sum += dist.ln();
    }
    Ok(digamma_difference(n, k) + std::f64::consts::LN_2 + log_sum / n as f64)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Population (biased) sample moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// `m4 / m2^2 - 3`.
    pub excess_kurtosis: f64,
    pub n: usize,
}

pub fn moments(samples: &[f64]) -> Result<MomentReport> {
    let n = samples.len();
    if n < 4 {
        return Err(Error::Contract(format!("moments need at least 4 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in samples {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(MomentReport {
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        n,
    })
}

/// Fraction of samples with `|x| > threshold`.
pub fn tail_mass(samples: &[f64], threshold: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|v| v.abs() > threshold).count() as f64 / samples.len() as f64
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 512;
/// Half-width of the evaluation grid in sample standard deviations.
pub const GRID_HALF_WIDTH_SD: f64 = 6.0;
/// Kernel contributions beyond this many bandwidths are dropped (< 1e-14).
const KERNEL_CUTOFF: f64 = 8.0;
const MIN_SAMPLES: usize = 10;

/// A kernel density estimate sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n_samples: usize,
}

impl DensityCurve {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Density at the grid point nearest to `x`.
    pub fn at(&self, x: f64) -> f64 {
        let i = self.grid.partition_point(|&g| g < x).min(self.grid.len() - 1);
        let j = i.saturating_sub(1);
        if (self.grid[j] - x).abs() < (self.grid[i] - x).abs() {
            self.density[j]
        } else {
            self.density[i]
        }
    }

    /// Skewness of the curve viewed as a density on the grid.
    pub fn skewness(&self) -> f64 {
        let w: Vec<f64> = self.density.clone();
        let total: f64 = w.iter().sum();
        let mean = self.grid.iter().zip(&w).map(|(x, p)| x * p).sum::<f64>() / total;
        let m2 = self.grid.iter().zip(&w).map(|(x, p)| (x - mean).powi(2) * p).sum::<f64>() / total;
        let m3 = self.grid.iter().zip(&w).map(|(x, p)| (x - mean).powi(3) * p).sum::<f64>() / total;
        m3 / m2.powf(1.5)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid_point,density\n");
        for (x, y) in self.grid.iter().zip(&self.density) {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule: `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
pub fn silverman_bandwidth(sorted: &[f64], sd: f64) -> f64 {
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (sorted.len() as f64).powf(-0.2)
}

/// Gaussian-kernel density estimate on a grid spanning the sample mean
/// plus or minus six sample standard deviations.
pub fn gaussian_kde(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityCurve> {
    gaussian_kde_with_grid(samples, bandwidth, DEFAULT_GRID_POINTS)
}

pub fn gaussian_kde_with_grid(samples: &[f64], bandwidth: Option<f64>, points: usize) -> Result<DensityCurve> {
    let n = samples.len();
    if n < MIN_SAMPLES {
        return Err(Error::Contract(format!("kde needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    if points < 2 {
        return Err(Error::Contract("kde grid needs at least 2 points".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("kde samples must be finite".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Contract("zero-variance sample: density is a point mass".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Contract(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(&sorted, sd),
    };
    let lo = mean - GRID_HALF_WIDTH_SD * sd;
    let step = 2.0 * GRID_HALF_WIDTH_SD * sd / (points - 1) as f64;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| {
            let start = sorted.partition_point(|&s| s < x - KERNEL_CUTOFF * h);
            let end = sorted.partition_point(|&s| s <= x + KERNEL_CUTOFF * h);
            let sum: f64 = sorted[start..end]
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            sum * norm
        })
        .collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
        n_samples: n,
    })
}

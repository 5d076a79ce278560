//! Density estimation, moments and tail statistics of normalized activations.

mod entropy;
mod kde;
mod moments;
mod sweep;

pub use entropy::knn_entropy;
pub use kde::{
    gaussian_kde, gaussian_kde_with_grid, silverman_bandwidth, DensityCurve, DEFAULT_GRID_POINTS,
    GRID_HALF_WIDTH_SD,
};
pub use moments::{moments, tail_mass, MomentReport};
pub use sweep::{
    pipeline_density_sweep, pre_affine_outputs, InputDistribution, SweepOptions, SweepResult,
    DEFAULT_SWEEP_SAMPLES, DEFAULT_TAIL_THRESHOLD,
};

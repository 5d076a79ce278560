use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::analysis::kde::{gaussian_kde_with_grid, DensityCurve, DEFAULT_GRID_POINTS};
use crate::analysis::moments::{moments, tail_mass, MomentReport};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::norm::{build_norm, NormKind, NormSpec};

pub const DEFAULT_SWEEP_SAMPLES: usize = 100_000;
pub const DEFAULT_TAIL_THRESHOLD: f64 = 2.5;

/// Input distribution for a density sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum InputDistribution {
    Gaussian { mean: f64, std: f64 },
    Laplace { loc: f64, scale: f64 },
    Exponential { rate: f64 },
}

impl InputDistribution {
    /// Builds a distribution from its name and positional parameters; missing
    /// parameters take the standard values (0, 1) or rate 1.
    pub fn from_name(name: &str, params: &[f64]) -> Result<Self> {
        let p = |i: usize, default: f64| params.get(i).copied().unwrap_or(default);
        let d = match name.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Self::Gaussian {
                mean: p(0, 0.0),
                std: p(1, 1.0),
            },
            "laplace" => Self::Laplace {
                loc: p(0, 0.0),
                scale: p(1, 1.0),
            },
            "exponential" | "exp" => Self::Exponential { rate: p(0, 1.0) },
            other => return Err(Error::Config(format!("unknown distribution `{other}`"))),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Laplace { .. } => "laplace",
            Self::Exponential { .. } => "exponential",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (scale, what) = match *self {
            Self::Gaussian { std, .. } => (std, "std"),
            Self::Laplace { scale, .. } => (scale, "scale"),
            Self::Exponential { rate } => (rate, "rate"),
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("{} {what} must be positive, got {scale}", self.name())));
        }
        Ok(())
    }

    /// `n` seeded draws.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", self.name()));
        Ok(match *self {
            Self::Gaussian { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| bad(&e))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Self::Exponential { rate } => {
                let d = Exp::new(rate).map_err(|e| bad(&e))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Self::Laplace { loc, scale } => {
                // Inverse CDF on u in (-1/2, 1/2).
                let u = Uniform::new(-0.5f64, 0.5).map_err(|e| bad(&e))?;
                (0..n)
                    .map(|_| {
                        let v = u.sample(&mut rng);
                        loc - scale * v.signum() * (-2.0 * v.abs()).ln_1p()
                    })
                    .collect()
            }
        })
    }
}

/// Options for [`pipeline_density_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Normalization group size; `None` treats the whole sample as one group.
    pub group_size: Option<usize>,
    pub grid_points: usize,
    pub bandwidth: Option<f64>,
    pub tail_threshold: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SWEEP_SAMPLES,
            seed: 0,
            group_size: None,
            grid_points: DEFAULT_GRID_POINTS,
            bandwidth: None,
            tail_threshold: DEFAULT_TAIL_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: NormSpec,
    pub curve: DensityCurve,
    pub moments: MomentReport,
    pub tail_mass: f64,
}

/// Pre-affine outputs of one normalization layer applied to `samples`.
///
/// Feature-wise layers see `[n / group, group]`; BatchNorm sees `[n, 1]` so
/// its statistics also span the whole sample.
pub fn pre_affine_outputs(samples: &[f64], spec: &NormSpec, group_size: Option<usize>, seed: u64) -> Result<Vec<f64>> {
    let n = samples.len();
    let group = group_size.unwrap_or(n);
    if group == 0 || !n.is_multiple_of(group) {
        return Err(Error::Config(format!("group size {group} does not divide {n} samples")));
    }
    let spec = spec.with_affine(false);
    let shape = if spec.kind == NormKind::BatchNorm {
        vec![n, 1]
    } else {
        vec![n / group, group]
    };
    let mut layer = build_norm::<f64>(spec, *shape.last().expect("rank 2"))?;
    let x = Tensor::new(shape, samples.to_vec())?;
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1);
    Ok(layer.apply(&x, Some(&mut noise))?.into_data())
}

/// Draws one seeded sample and pushes it through every spec.
pub fn pipeline_density_sweep(
    input: &InputDistribution,
    specs: &[NormSpec],
    options: &SweepOptions,
) -> Result<Vec<SweepResult>> {
    let samples = input.sample(options.n_samples, options.seed)?;
    specs
        .iter()
        .map(|spec| {
            let out = pre_affine_outputs(&samples, spec, options.group_size, options.seed)?;
            Ok(SweepResult {
                spec: *spec,
                curve: gaussian_kde_with_grid(&out, options.bandwidth, options.grid_points)?,
                moments: moments(&out)?,
                tail_mass: tail_mass(&out, options.tail_threshold),
            })
        })
        .collect()
}

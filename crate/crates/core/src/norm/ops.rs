//! Graph-level forward passes for each normalization family.
//!
//! Feature-wise layers (LayerNorm, RMSNorm, NormalNorm, IBNorm) treat the last
//! axis as one normalization group. BatchNorm normalizes rank-2 `[batch,
//! features]` inputs across axis 0.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::compression;
use crate::error::{Error, Result};
use crate::norm::power;
use crate::norm::spec::{NormKind, NormOrder, NormSpec};
use crate::scalar::Scalar;

/// Graph handles of a layer's learnable scale and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Train/eval switch for layers with batch-dependent behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running statistics of a BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub mode: Mode,
}

impl<T: Scalar> BatchStats<T> {
    pub fn new(features: usize, momentum: T) -> Self {
        Self {
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::ones(vec![features]),
            momentum,
            mode: Mode::Train,
        }
    }
}

fn last_axis<T: Scalar>(g: &Graph<T>, x: Var) -> Result<usize> {
    let shape = g.shape(x);
    match shape.last() {
        Some(&h) if h >= 1 => Ok(shape.len() - 1),
        _ => Err(Error::Contract(format!("normalization needs a nonempty last axis, got {shape:?}"))),
    }
}

/// `(x - mean) / sqrt(var + eps)` along `axis`.
pub fn standardize<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize, eps: T) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mu = g.mean_axis(x, axis, true)?;
    let mu = g.broadcast(mu, shape.clone())?;
    let centred = g.sub(x, mu)?;
    let var = g.var_axis(x, axis, true)?;
    let var = g.add_scalar(var, eps);
    let sd = g.sqrt(var)?;
    let sd = g.broadcast(sd, shape)?;
    g.div(centred, sd)
}

/// `gamma * x + beta` with per-feature parameters broadcast over leading axes.
pub fn apply_affine<T: Scalar>(g: &mut Graph<T>, x: Var, affine: &AffineVars) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let gamma = g.broadcast(affine.gamma, shape.clone())?;
    let beta = g.broadcast(affine.beta, shape)?;
    let scaled = g.mul(x, gamma)?;
    g.add(scaled, beta)
}

fn finish<T: Scalar>(g: &mut Graph<T>, x: Var, affine: Option<&AffineVars>) -> Result<Var> {
    match affine {
        Some(a) => apply_affine(g, x, a),
        None => Ok(x),
    }
}

pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &NormSpec,
    affine: Option<&AffineVars>,
) -> Result<Var> {
    let axis = last_axis(g, x)?;
    let out = standardize(g, x, axis, T::of(spec.epsilon))?;
    finish(g, out, affine)
}

/// `x / sqrt(mean(x^2) + eps)`, no re-centring.
pub fn rms_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &NormSpec,
    affine: Option<&AffineVars>,
) -> Result<Var> {
    let axis = last_axis(g, x)?;
    let shape = g.shape(x).to_vec();
    let sq = g.mul(x, x)?;
    let ms = g.mean_axis(sq, axis, true)?;
    let ms = g.add_scalar(ms, T::of(spec.epsilon));
    let rms = g.sqrt(ms)?;
    let rms = g.broadcast(rms, shape)?;
    let out = g.div(x, rms)?;
    finish(g, out, affine)
}

/// Standardizes each feature across the batch axis.
///
/// Train mode uses batch statistics and updates the running estimates with
/// `running = (1 - momentum) * running + momentum * batch`; eval mode reads
/// the running estimates and leaves them untouched.
pub fn batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &NormSpec,
    affine: Option<&AffineVars>,
    stats: &mut BatchStats<T>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("batch_norm expects [batch, features], got {shape:?}")));
    }
    let (batch, features) = (shape[0], shape[1]);
    if stats.running_mean.numel() != features {
        return Err(Error::Contract(format!(
            "batch_norm: {features} features vs {} running statistics",
            stats.running_mean.numel()
        )));
    }
    let eps = T::of(spec.epsilon);
    let out = match stats.mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::Contract("batch_norm in train mode needs batch size >= 2".into()));
            }
            let out = standardize(g, x, 0, eps)?;
            let m = stats.momentum;
            let keep = T::one() - m;
            let xv = g.value(x).data();
            let n = T::of_usize(batch);
            for f in 0..features {
                let mean = (0..batch).map(|b| xv[b * features + f]).sum::<T>() / n;
                let var = (0..batch)
                    .map(|b| {
                        let d = xv[b * features + f] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let rm = &mut stats.running_mean.data_mut()[f];
                *rm = keep * *rm + m * mean;
                let rv = &mut stats.running_var.data_mut()[f];
                *rv = keep * *rv + m * var;
            }
            out
        }
        Mode::Eval => {
            let mean = g.constant(stats.running_mean.reshaped(vec![1, features])?);
            let sd = g.constant(
                stats
                    .running_var
                    .map(|v| (v + eps).sqrt())
                    .reshaped(vec![1, features])?,
            );
            let mean = g.broadcast(mean, shape.clone())?;
            let sd = g.broadcast(sd, shape)?;
            let centred = g.sub(x, mean)?;
            g.div(centred, sd)?
        }
    };
    finish(g, out, affine)
}

/// Compression followed by standardization (or the reverse for the
/// standardize-then-compress ablation), then the optional affine map.
pub fn ibnorm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &NormSpec,
    affine: Option<&AffineVars>,
) -> Result<Var> {
    if spec.kind != NormKind::IbNorm {
        return Err(Error::Contract(format!("ibnorm called with a {:?} spec", spec.kind)));
    }
    let compression = spec
        .compression
        .ok_or_else(|| Error::Contract("ibnorm spec has no compression settings".into()))?;
    let axis = last_axis(g, x)?;
    let params = compression.params(g.shape(x)[axis])?;
    let eps = T::of(spec.epsilon);
    let out = match spec.order {
        NormOrder::CompressThenStandardize => {
            // Compression shrinks deviations by up to alpha = 1/lambda, so the
            // guard is rescaled to keep epsilon in the input's units; linear
            // compression then reduces exactly to LayerNorm.
            let alpha = T::one() / T::of(compression.lambda);
            let c = compression::compress(g, x, &params)?;
            standardize(g, c, axis, eps * alpha * alpha)?
        }
        NormOrder::StandardizeThenCompress => {
            let s = standardize(g, x, axis, eps)?;
            compression::compress(g, s, &params)?
        }
    };
    finish(g, out, affine)
}

/// Exponent used by a NormalNorm forward pass.
pub fn resolve_power_lambda<T: Scalar>(spec: &NormSpec, standardized: &[T]) -> T {
    if let Some(l) = spec.power_lambda {
        return T::of(l);
    }
    let (lo, hi) = power::LAMBDA_SEARCH_RANGE;
    match power::estimate_power_lambda(standardized, lo, hi, power::LAMBDA_SEARCH_ITERS) {
        Ok(l) => l,
        Err(e) => {
            log::warn!("power exponent estimation failed ({e}); falling back to 1");
            T::one()
        }
    }
}

/// Standardize, gaussianize with the power transform, add scaled Gaussian
/// noise, then apply the affine map.
///
/// The exponent estimate and the noise term are computed off-graph. Noise is
/// drawn only when `rng` is given and the noise factor is positive; its scale
/// per group is the mean absolute deviation of the transformed group. Returns
/// the output and the exponent that was used.
pub fn normal_norm<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    spec: &NormSpec,
    affine: Option<&AffineVars>,
    rng: Option<&mut R>,
) -> Result<(Var, T)> {
    if spec.kind != NormKind::NormalNorm {
        return Err(Error::Contract(format!("normal_norm called with a {:?} spec", spec.kind)));
    }
    let axis = last_axis(g, x)?;
    let c = standardize(g, x, axis, T::of(spec.epsilon))?;
    let lambda = resolve_power_lambda(spec, g.value(c).data());
    let mut out = g.power_transform(c, lambda)?;
    if let (Some(rng), true) = (rng, spec.noise_factor > 0.0) {
        let xi = T::of(spec.noise_factor);
        let t = g.value(out);
        let h = t.last_dim();
        let mut noise = Vec::with_capacity(t.numel());
        for group in t.data().chunks(h) {
            let mean = group.iter().copied().sum::<T>() / T::of_usize(h);
            let mad = group.iter().map(|&v| (v - mean).abs()).sum::<T>() / T::of_usize(h);
            for _ in group {
                let z: f64 = StandardNormal.sample(rng);
                noise.push(T::of(z) * mad * xi);
            }
        }
        let noise = g.constant(Tensor::new(t.shape().to_vec(), noise)?);
        out = g.add(out, noise)?;
    }
    Ok((finish(g, out, affine)?, lambda))
}

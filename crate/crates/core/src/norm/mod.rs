//! Normalization layer family: LayerNorm, RMSNorm, BatchNorm, NormalNorm and
//! the compression-based IBNorm.

mod ops;
pub mod power;
mod spec;

pub use ops::{
    apply_affine, batch_norm, ibnorm, layer_norm, normal_norm, resolve_power_lambda, rms_norm,
    standardize, AffineVars, BatchStats, Mode,
};
pub use power::{estimate_power_lambda, power_transform};
pub use spec::{Compression, NormKind, NormOrder, NormSpec, DEFAULT_EPSILON, DEFAULT_MOMENTUM};

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learnable per-feature scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![features]),
            beta: Tensor::zeros(vec![features]),
        }
    }

    /// Records both tensors as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AffineVars {
        let mut gamma = self.gamma.clone();
        let mut beta = self.beta.clone();
        gamma.set_requires_grad(trainable);
        beta.set_requires_grad(trainable);
        AffineVars {
            gamma: g.leaf(gamma),
            beta: g.leaf(beta),
        }
    }
}

/// A constructed normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer<T> {
    spec: NormSpec,
    features: usize,
    pub affine: Option<AffineParams<T>>,
    pub stats: Option<BatchStats<T>>,
    last_power_lambda: Option<T>,
}

/// Builds a layer for `features`-wide inputs with `gamma = 1`, `beta = 0`.
pub fn build_norm<T: Scalar>(spec: NormSpec, features: usize) -> Result<NormLayer<T>> {
    spec.validate()?;
    if features == 0 {
        return Err(Error::Config("normalization width must be at least 1".into()));
    }
    if let Some(c) = spec.compression {
        c.params(features)?;
    }
    Ok(NormLayer {
        spec,
        features,
        affine: spec.affine.then(|| AffineParams::identity(features)),
        stats: (spec.kind == NormKind::BatchNorm).then(|| BatchStats::new(features, T::of(spec.momentum))),
        last_power_lambda: None,
    })
}

impl<T: Scalar> NormLayer<T> {
    pub fn spec(&self) -> &NormSpec {
        &self.spec
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Number of learnable scalars (`2 * features` with affine, else 0).
    pub fn num_params(&self) -> usize {
        self.affine.as_ref().map_or(0, |a| a.gamma.numel() + a.beta.numel())
    }

    /// Power exponent used by the most recent NormalNorm forward pass.
    pub fn last_power_lambda(&self) -> Option<T> {
        self.last_power_lambda
    }

    pub fn set_mode(&mut self, mode: Mode) {
        if let Some(stats) = self.stats.as_mut() {
            stats.mode = mode;
        }
    }

    pub fn bind_affine(&self, g: &mut Graph<T>, trainable: bool) -> Option<AffineVars> {
        self.affine.as_ref().map(|a| a.bind(g, trainable))
    }

    /// Runs the layer; `affine` must come from [`Self::bind_affine`] on the
    /// same graph. `noise_rng` enables NormalNorm noise.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        affine: Option<&AffineVars>,
        noise_rng: Option<&mut R>,
    ) -> Result<Var> {
        if g.value(x).last_dim() != self.features {
            return Err(Error::Shape {
                op: "norm",
                detail: format!("input {:?} vs layer width {}", g.shape(x), self.features),
            });
        }
        if self.spec.affine != affine.is_some() {
            return Err(Error::Contract("affine handles must match the layer's affine flag".into()));
        }
        match self.spec.kind {
            NormKind::LayerNorm => layer_norm(g, x, &self.spec, affine),
            NormKind::RmsNorm => rms_norm(g, x, &self.spec, affine),
            NormKind::IbNorm => ibnorm(g, x, &self.spec, affine),
            NormKind::BatchNorm => {
                let stats = self
                    .stats
                    .as_mut()
                    .ok_or_else(|| Error::Contract("batch norm layer without statistics".into()))?;
                batch_norm(g, x, &self.spec, affine, stats)
            }
            NormKind::NormalNorm => {
                let (out, lambda) = normal_norm(g, x, &self.spec, affine, noise_rng)?;
                self.last_power_lambda = Some(lambda);
                Ok(out)
            }
        }
    }

    /// Eager forward without recording parameters as trainable.
    pub fn apply<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, noise_rng: Option<&mut R>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let affine = self.bind_affine(&mut g, false);
        let out = self.forward(&mut g, xv, affine.as_ref(), noise_rng)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_inputs;
    use crate::compression::CompressionKind;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn run(spec: NormSpec, x: Tensor<f64>) -> Vec<f64> {
        let mut layer = build_norm::<f64>(spec, x.last_dim()).unwrap();
        layer.apply::<NoRng>(&x, None).unwrap().into_data()
    }

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_examples() {
        let tiny = NormSpec::layer_norm().with_epsilon(1e-300).with_affine(false);
        let out = run(tiny, row(&[1.0, 2.0, 3.0]));
        let s = 1.5f64.sqrt();
        assert_relative_eq!(out[0], -s, max_relative = 1e-12);
        assert_relative_eq!(out[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(out[2], s, max_relative = 1e-12);

        assert_eq!(run(NormSpec::layer_norm(), row(&[5.0, 5.0, 5.0])), vec![0.0; 3]);

        let x = row(&[0.3, -1.0, 2.0, 0.5]);
        let with = run(NormSpec::layer_norm(), x.clone());
        let without = run(NormSpec::layer_norm().with_affine(false), x);
        assert_eq!(with, without);
    }

    #[test]
    fn rms_norm_examples() {
        let spec = NormSpec::rms_norm().with_epsilon(1e-300);
        let out = run(spec, row(&[3.0, 4.0]));
        assert_relative_eq!(out[0], 3.0 / 12.5f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(out[1], 4.0 / 12.5f64.sqrt(), max_relative = 1e-12);
        assert_eq!(run(NormSpec::rms_norm(), row(&[0.0, 0.0])), vec![0.0, 0.0]);
        let unit = run(spec, row(&[1.0, -1.0, 1.0, -1.0]));
        assert_eq!(unit, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn batch_norm_examples() {
        let spec = NormSpec::batch_norm().with_epsilon(1e-300);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut layer = build_norm::<f64>(spec, 1).unwrap();
        let out = layer.apply::<NoRng>(&x, None).unwrap();
        assert_relative_eq!(out.data()[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(out.data()[1], 1.0, max_relative = 1e-12);
        let stats = layer.stats.as_ref().unwrap();
        assert_relative_eq!(stats.running_mean.data()[0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(stats.running_var.data()[0], 0.9 + 0.1 * 1.0, max_relative = 1e-12);

        // eval with standard statistics is the identity
        let mut eval = build_norm::<f64>(NormSpec::batch_norm().with_epsilon(1e-300), 2).unwrap();
        eval.set_mode(Mode::Eval);
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]).unwrap();
        let before = eval.stats.clone();
        let out = eval.apply::<NoRng>(&x, None).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        assert_eq!(eval.stats, before);

        let constant = Tensor::new(vec![3, 1], vec![2.0; 3]).unwrap();
        let mut layer = build_norm::<f64>(NormSpec::batch_norm(), 1).unwrap();
        assert_eq!(layer.apply::<NoRng>(&constant, None).unwrap().into_data(), vec![0.0; 3]);
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_train_mode() {
        let mut layer = build_norm::<f64>(NormSpec::batch_norm(), 2).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(layer.apply::<NoRng>(&x, None), Err(Error::Contract(_))));
    }

    #[test]
    fn ibnorm_examples() {
        let x = row(&[0.7, -1.3, 2.2, 0.1, -0.4]);
        let s1 = run(NormSpec::ib_norm(CompressionKind::S, 1.0).with_affine(false), x.clone());
        let ln = run(NormSpec::layer_norm().with_affine(false), x);
        for (a, b) in s1.iter().zip(&ln) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        assert_eq!(run(NormSpec::ib_norm(CompressionKind::T, 4.0), row(&[3.0; 4])), vec![0.0; 4]);

        let out = run(NormSpec::ib_norm(CompressionKind::T, 4.0).with_affine(false), row(&[0.0, 4.0, -4.0]));
        // standardize([0, t, -t]) = [0, sqrt(1.5), -sqrt(1.5)] up to epsilon / lambda^2
        let t = 1f64.tanh();
        let expect = t / ((2.0 * t * t / 3.0) + 1e-5 / 16.0).sqrt();
        assert_relative_eq!(out[1], expect, max_relative = 1e-12);
        assert_relative_eq!(out[1], 1.2247, epsilon = 1e-4);
        assert_eq!(out[0], 0.0);
        assert_relative_eq!(out[2], -expect, max_relative = 1e-12);
    }

    #[test]
    fn ibnorm_rejects_other_kinds() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(row(&[1.0, 2.0]));
        assert!(ibnorm(&mut g, x, &NormSpec::layer_norm(), None).is_err());
    }

    #[test]
    fn normal_norm_examples() {
        let x = row(&[0.3, -1.0, 2.0, 0.5, -0.2]);
        let fixed = NormSpec::normal_norm(0.0).with_power_lambda(Some(1.0));
        let out = run(fixed, x.clone());
        let ln = run(NormSpec::layer_norm(), x.clone());
        for (a, b) in out.iter().zip(&ln) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-14);
        }

        // lambda = 0: ln(c + 1) on the nonnegative standardized values and
        // -((1 - c)^2 - 1) / 2 on the negative ones
        let xs = row(&[1.0, 2.0, 3.0, 6.0]);
        let log_spec = NormSpec::normal_norm(0.0).with_power_lambda(Some(0.0));
        let out = run(log_spec, xs.clone());
        let std = run(NormSpec::layer_norm(), xs);
        for (o, &c) in out.iter().zip(&std) {
            let expect = if c >= 0.0 { (c + 1.0).ln() } else { -((1.0 - c).powi(2) - 1.0) / 2.0 };
            assert_relative_eq!(*o, expect, max_relative = 1e-12);
        }

        let noisy = NormSpec::normal_norm(1.0);
        let mut a = build_norm::<f64>(noisy, 5).unwrap();
        let mut b = build_norm::<f64>(noisy, 5).unwrap();
        let ra = a.apply(&x, Some(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        let rb = b.apply(&x, Some(&mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        assert_eq!(ra, rb);
        let clean = build_norm::<f64>(noisy, 5).unwrap().apply::<NoRng>(&x, None).unwrap();
        assert_ne!(ra, clean);
    }

    #[test]
    fn build_norm_contracts() {
        let ln = build_norm::<f64>(NormSpec::layer_norm(), 8).unwrap();
        assert_eq!(ln.num_params(), 16);
        let mut missing = NormSpec::ib_norm(CompressionKind::S, 3.0);
        missing.compression = None;
        assert!(matches!(build_norm::<f64>(missing, 4), Err(Error::Config(_))));

        let spec = NormSpec::ib_norm(CompressionKind::S, 3.0);
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.9, -0.4, 2.0, 1.0, 3.5]).unwrap();
        let mut layer = build_norm::<f64>(spec, 3).unwrap();
        let via_layer = layer.apply::<NoRng>(&x, None).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = AffineParams::<f64>::identity(3).bind(&mut g, false);
        let direct = ibnorm(&mut g, xv, &spec, Some(&a)).unwrap();
        assert_eq!(&via_layer, g.value(direct));
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let x = Tensor::new(vec![2, 5], vec![0.3, -1.1, 2.0, 0.45, -0.2, 1.3, 0.2, -0.7, 0.9, 2.4]).unwrap();
        let gamma = Tensor::vector(vec![1.1, 0.9, -0.5, 1.3, 0.7]);
        let beta = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5]);
        let weights = Tensor::new(vec![2, 5], vec![0.5, -1.0, 0.25, 2.0, 1.5, -0.3, 0.8, 1.2, -1.7, 0.6]).unwrap();
        let specs = [
            NormSpec::layer_norm(),
            NormSpec::rms_norm(),
            NormSpec::ib_norm(CompressionKind::L, 4.0),
            NormSpec::ib_norm(CompressionKind::T, 2.0).with_order(NormOrder::StandardizeThenCompress),
            NormSpec::normal_norm(0.0).with_power_lambda(Some(0.6)),
        ];
        for spec in specs {
            let report = grad_check_inputs(
                |g, v| {
                    let a = AffineVars {
                        gamma: v[1],
                        beta: v[2],
                    };
                    let out = match spec.kind {
                        NormKind::LayerNorm => layer_norm(g, v[0], &spec, Some(&a))?,
                        NormKind::RmsNorm => rms_norm(g, v[0], &spec, Some(&a))?,
                        NormKind::IbNorm => ibnorm(g, v[0], &spec, Some(&a))?,
                        _ => normal_norm::<f64, NoRng>(g, v[0], &spec, Some(&a), None)?.0,
                    };
                    let w = g.constant(weights.clone());
                    let weighted = g.mul(out, w)?;
                    g.sum(weighted)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{spec}: {report:?}");
        }
    }
}

use ibnorm_core::autodiff::{grad_check_inputs, Graph, Tensor};
use ibnorm_core::compression::{compress_slice, f_lambda, CompressionParams};
use ibnorm_core::norm::{self, AffineParams, AffineVars, BatchStats};
use ibnorm_core::{build_norm, CompressionKind, NormKind, NormOrder, NormSpec};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

type NoRng = ChaCha8Rng;

fn pre_affine(spec: NormSpec, x: &Tensor<f64>) -> Vec<f64> {
    let mut layer = build_norm::<f64>(spec.with_affine(false), x.last_dim()).unwrap();
    layer.apply::<NoRng>(x, None).unwrap().into_data()
}

fn rows(n: usize, h: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * h).prop_map(move |d| Tensor::new(vec![n, h], d).unwrap())
}

fn non_degenerate(x: &Tensor<f64>) -> bool {
    x.data().chunks(x.last_dim()).all(|r| {
        let m = r.iter().sum::<f64>() / r.len() as f64;
        r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64 > 1e-2
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ibnorm_s_equals_layer_norm(x in rows(3, 8), lambda in 0.01f64..100.0) {
        let a = pre_affine(NormSpec::layer_norm(), &x);
        let b = pre_affine(NormSpec::ib_norm(CompressionKind::S, lambda), &x);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10, "{} vs {}", u, v);
        }
    }

    #[test]
    fn standardized_groups_have_zero_mean_unit_variance(x in rows(2, 16), k in 0usize..4) {
        prop_assume!(non_degenerate(&x));
        let spec = match k {
            0 => NormSpec::layer_norm(),
            1 => NormSpec::ib_norm(CompressionKind::L, 4.0),
            2 => NormSpec::ib_norm(CompressionKind::T, 4.0),
            _ => NormSpec::ib_norm(CompressionKind::S, 2.0),
        }.with_epsilon(1e-12);
        let out = pre_affine(spec, &x);
        for g in out.chunks(16) {
            let m = g.iter().sum::<f64>() / 16.0;
            let v = g.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_is_scale_invariant(x in rows(2, 6)) {
        prop_assume!(non_degenerate(&x));
        let spec = NormSpec::layer_norm().with_epsilon(1e-8);
        let base = pre_affine(spec, &x);
        for c in [0.5, 3.0, 100.0] {
            let scaled = pre_affine(spec, &x.map(|v| v * c));
            for (u, v) in base.iter().zip(&scaled) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn compression_is_odd_about_the_mean(mu in -3.0f64..3.0, d in 0.0f64..10.0, k in 0usize..3) {
        let kind = CompressionKind::ALL[k];
        let params = CompressionParams::new(kind, 4.0, 2).unwrap();
        let out = compress_slice(&[mu + d, mu - d], &params).unwrap();
        prop_assert!(((out[0] - mu) + (out[1] - mu)).abs() <= 1e-12 * (1.0 + mu.abs() + d));
    }
}

#[test]
fn compression_fixed_point_is_exact() {
    for kind in CompressionKind::ALL {
        let params = CompressionParams::new(kind, 4.0, 5).unwrap();
        let x = [0.7; 5];
        assert_eq!(compress_slice(&x, &params).unwrap(), x.to_vec());
    }
}

#[test]
fn compression_is_monotone_on_log_grid() {
    let grid: Vec<f64> = (0..200).map(|i| 10f64.powf(-6.0 + 9.0 * i as f64 / 199.0)).collect();
    for kind in CompressionKind::ALL {
        for lambda in [1.0, 2.0, 4.0, 8.0] {
            let vals: Vec<f64> = grid.iter().map(|&r| f_lambda(kind, r, lambda).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{kind} {lambda}");
        }
    }
}

#[test]
fn affine_identity_is_bitwise_noop() {
    let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 1.3).cos() * 2.0).collect()).unwrap();
    for spec in [
        NormSpec::layer_norm(),
        NormSpec::rms_norm(),
        NormSpec::ib_norm(CompressionKind::T, 4.0),
        NormSpec::normal_norm(0.0).with_power_lambda(Some(0.8)),
    ] {
        let with = {
            let mut l = build_norm::<f64>(spec, 5).unwrap();
            l.apply::<NoRng>(&x, None).unwrap().into_data()
        };
        let without = pre_affine(spec, &x);
        assert!(with.iter().zip(&without).all(|(a, b)| a.to_bits() == b.to_bits()), "{spec}");
    }
}

#[test]
fn every_layer_backward_passes_grad_check() {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let specs = [
        NormSpec::layer_norm(),
        NormSpec::rms_norm(),
        NormSpec::batch_norm(),
        NormSpec::ib_norm(CompressionKind::S, 4.0),
        NormSpec::ib_norm(CompressionKind::L, 4.0),
        NormSpec::ib_norm(CompressionKind::T, 4.0),
        NormSpec::ib_norm(CompressionKind::L, 4.0).with_order(NormOrder::StandardizeThenCompress),
        NormSpec::ib_norm(CompressionKind::T, 4.0).with_order(NormOrder::StandardizeThenCompress),
        NormSpec::normal_norm(0.0).with_power_lambda(Some(0.7)),
    ];
    for spec in specs {
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let data: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = Tensor::new(vec![4, 6], data).unwrap();
            let w: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Tensor::new(vec![4, 6], w).unwrap();
            let gamma = Tensor::vector((0..6).map(|_| rng.random_range(0.5..1.5)).collect());
            let beta = Tensor::vector((0..6).map(|_| rng.random_range(-0.5..0.5)).collect());
            let r = grad_check_inputs(
                |g: &mut Graph<f64>, v| {
                    let a = AffineVars { gamma: v[1], beta: v[2] };
                    let out = match spec.kind {
                        NormKind::LayerNorm => norm::layer_norm(g, v[0], &spec, Some(&a))?,
                        NormKind::RmsNorm => norm::rms_norm(g, v[0], &spec, Some(&a))?,
                        NormKind::BatchNorm => {
                            let mut stats = BatchStats::new(6, 0.1);
                            norm::batch_norm(g, v[0], &spec, Some(&a), &mut stats)?
                        }
                        NormKind::IbNorm => norm::ibnorm(g, v[0], &spec, Some(&a))?,
                        NormKind::NormalNorm => norm::normal_norm::<f64, NoRng>(g, v[0], &spec, Some(&a), None)?.0,
                    };
                    let wv = g.constant(w.clone());
                    let p = g.mul(out, wv)?;
                    g.sum(p)
                },
                &[x, gamma, beta],
                1e-5,
            )
            .unwrap();
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst < 1e-4, "{spec}: {worst}");
    }
}

#[test]
fn frozen_affine_receives_no_gradient() {
    let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 1.0, 2.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.param(x);
    let a = AffineParams::<f64>::identity(3).bind(&mut g, false);
    let y = norm::layer_norm(&mut g, xv, &NormSpec::layer_norm(), Some(&a)).unwrap();
    let y = g.mul(y, y).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a.gamma).is_none());
    assert!(grads.get(xv).is_some());
}

//! Property suite behind `ibnorm verify`.
//!
//! Each check returns a pass/fail record with a witness for failures. A
//! deliberate derivative mutation can be injected to confirm the suite
//! notices a broken rule.

use std::str::FromStr;
use std::time::Instant;

use ibnorm_core::analysis::{knn_entropy, InputDistribution};
use ibnorm_core::autodiff::{grad_check_inputs, Graph, Tensor};
use ibnorm_core::compression::{
    certify_bounded, compress_slice, compression_ratio, f_lambda, f_lambda_derivative, CompressionParams,
};
use ibnorm_core::info::{gram, matrix_entropy, mutual_information, GramMatrix};
use ibnorm_core::norm::{self, AffineVars, BatchStats};
use ibnorm_core::{build_norm, CompressionKind, NormKind, NormOrder, NormSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const LAMBDA_GRID: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// 200 log-spaced deviations in `[1e-6, 1e3]`.
pub fn deviation_grid() -> Vec<f64> {
    (0..200).map(|i| 10f64.powf(-6.0 + 9.0 * i as f64 / 199.0)).collect()
}

/// Fault injected into the derivative rule used by the checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    /// Flips a sign inside the L and T derivatives.
    DerivativeSign,
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "derivative-sign" => Ok(Self::DerivativeSign),
            other => Err(format!("unknown mutation `{other}` (none, derivative-sign)")),
        }
    }
}

fn derivative(kind: CompressionKind, r: f64, lambda: f64, m: Mutation) -> f64 {
    match m {
        Mutation::None => f_lambda_derivative(kind, r, lambda).expect("valid grid point"),
        Mutation::DerivativeSign => match kind {
            CompressionKind::S => 1.0 / lambda,
            CompressionKind::L => 1.0 / (lambda - r),
            CompressionKind::T => {
                let t = (r / lambda).tanh();
                (1.0 + t * t) / lambda
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<serde_json::Value>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub mutation: Mutation,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

type Outcome = Result<String, (String, serde_json::Value)>;
type Check = fn(Mutation) -> Outcome;

const CHECKS: &[(&str, Check)] = &[
    ("compression.bounded", bounded),
    ("compression.jacobian_bound", jacobian_bound),
    ("compression.derivative_matches_finite_difference", derivative_fd),
    ("compression.entropy_reduction", entropy_reduction),
    ("norm.ibnorm_s_matches_layernorm", s_matches_layernorm),
    ("norm.grad_check", norm_grad_check),
    ("info.entropy_anchors", entropy_anchors),
    ("info.gram_invariants", gram_invariants),
    ("info.mutual_information_symmetry", mi_symmetry),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, mutation: Mutation) -> VerifyReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, check)| {
            let start = Instant::now();
            let outcome = check(mutation);
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            log::info!("{name}: {:.1} ms", elapsed_ms);
            match outcome {
                Ok(detail) => CheckResult {
                    name: name.to_string(),
                    passed: true,
                    detail,
                    witness: None,
                    elapsed_ms,
                },
                Err((detail, witness)) => CheckResult {
                    name: name.to_string(),
                    passed: false,
                    detail,
                    witness: Some(witness),
                    elapsed_ms,
                },
            }
        })
        .collect();
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        mutation,
        checks,
    }
}

fn bounded(_: Mutation) -> Outcome {
    let grid = deviation_grid();
    for kind in CompressionKind::ALL {
        for lambda in LAMBDA_GRID {
            if let Some(v) = certify_bounded(kind, lambda, &grid).expect("positive lambda") {
                return Err((
                    format!("0 <= f(r) <= r/lambda fails for {kind} at lambda {lambda}"),
                    json!({"kind": kind.to_string(), "lambda": lambda, "r": v.r, "value": v.value, "bound": v.bound}),
                ));
            }
        }
    }
    Ok(format!("{} grid points x 3 kinds x {} lambdas", grid.len(), LAMBDA_GRID.len()))
}

fn jacobian_bound(m: Mutation) -> Outcome {
    for kind in CompressionKind::ALL {
        for lambda in LAMBDA_GRID {
            let bound = compression_ratio(kind, lambda).expect("positive lambda");
            for r in deviation_grid() {
                let d = derivative(kind, r, lambda, m);
                if !(d >= 0.0 && d <= bound) {
                    return Err((
                        format!("f'(r) outside [0, 1/lambda] for {kind} at lambda {lambda}"),
                        json!({"kind": kind.to_string(), "lambda": lambda, "r": r, "derivative": d, "bound": bound}),
                    ));
                }
            }
        }
    }
    Ok("f'(r) <= 1/lambda everywhere on the grid".into())
}

fn derivative_fd(m: Mutation) -> Outcome {
    let mut worst = 0.0f64;
    for kind in CompressionKind::ALL {
        for lambda in LAMBDA_GRID {
            for r in deviation_grid().into_iter().filter(|&r| r >= 1e-3) {
                let h = 1e-6 * r.max(1.0);
                let f = |x: f64| f_lambda(kind, x, lambda).expect("valid point");
                let numeric = (f(r + h) - f(r - h)) / (2.0 * h);
                let analytic = derivative(kind, r, lambda, m);
                let err = (analytic - numeric).abs();
                let tol = 1e-6 * analytic.abs().max(numeric.abs()) + 1e-9;
                worst = worst.max(err / tol);
                if !(err <= tol) {
                    return Err((
                        format!("analytic f' disagrees with central differences for {kind} at lambda {lambda}"),
                        json!({"kind": kind.to_string(), "lambda": lambda, "r": r, "analytic": analytic, "numeric": numeric}),
                    ));
                }
            }
        }
    }
    Ok(format!("worst error {worst:.3} of tolerance"))
}

pub const ENTROPY_SEEDS: u64 = 20;
pub const ENTROPY_SAMPLES: usize = 10_000;
pub const ENTROPY_MIN_WINS: usize = 19;

/// k-NN entropy of raw and compressed standard-normal draws per seed.
pub fn entropy_pairs(kind: CompressionKind, lambda: f64) -> ibnorm_core::Result<Vec<(f64, f64)>> {
    let dist = InputDistribution::Gaussian { mean: 0.0, std: 1.0 };
    let params = CompressionParams::new(kind, lambda, ENTROPY_SAMPLES)?;
    (0..ENTROPY_SEEDS)
        .map(|seed| {
            let z = dist.sample(ENTROPY_SAMPLES, seed)?;
            let c = compress_slice(&z, &params)?;
            Ok((knn_entropy(&z, 3)?, knn_entropy(&c, 3)?))
        })
        .collect()
}

fn entropy_reduction(_: Mutation) -> Outcome {
    let mut detail = Vec::new();
    for kind in [CompressionKind::L, CompressionKind::T] {
        let pairs = entropy_pairs(kind, 4.0).map_err(|e| (e.to_string(), json!({"kind": kind.to_string()})))?;
        let wins = pairs.iter().filter(|(raw, c)| c <= raw).count();
        if wins < ENTROPY_MIN_WINS {
            return Err((
                format!("compressed entropy <= raw in only {wins}/{ENTROPY_SEEDS} seeds for {kind}"),
                json!({"kind": kind.to_string(), "pairs": pairs}),
            ));
        }
        detail.push(format!("{kind}: {wins}/{ENTROPY_SEEDS}"));
    }
    Ok(detail.join(", "))
}

fn pre_affine(spec: NormSpec, x: &Tensor<f64>) -> ibnorm_core::Result<Vec<f64>> {
    let mut layer = build_norm::<f64>(spec.with_affine(false), x.last_dim())?;
    Ok(layer.apply::<ChaCha8Rng>(x, None)?.into_data())
}

fn s_matches_layernorm(_: Mutation) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let x = Tensor::new(vec![4, 16], (0..64).map(|_| scale * rng.random_range(-3.0..3.0)).collect())
            .expect("shape");
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let fail = |e: ibnorm_core::Error| (e.to_string(), json!({"lambda": lambda}));
        let a = pre_affine(NormSpec::layer_norm(), &x).map_err(fail)?;
        let b = pre_affine(NormSpec::ib_norm(CompressionKind::S, lambda), &x).map_err(fail)?;
        let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        if !(diff <= 1e-10) {
            return Err((
                "IBNorm-S and LayerNorm pre-affine outputs differ".into(),
                json!({"lambda": lambda, "max_abs_diff": diff, "input": x.data()}),
            ));
        }
    }
    Ok(format!("max |difference| {worst:.2e} over 100 inputs"))
}

/// Every layer variant covered by the gradient check.
pub fn grad_check_specs() -> Vec<NormSpec> {
    vec![
        NormSpec::layer_norm(),
        NormSpec::rms_norm(),
        NormSpec::batch_norm(),
        NormSpec::ib_norm(CompressionKind::S, 4.0),
        NormSpec::ib_norm(CompressionKind::L, 4.0),
        NormSpec::ib_norm(CompressionKind::T, 4.0),
        NormSpec::ib_norm(CompressionKind::S, 4.0).with_order(NormOrder::StandardizeThenCompress),
        NormSpec::ib_norm(CompressionKind::L, 4.0).with_order(NormOrder::StandardizeThenCompress),
        NormSpec::ib_norm(CompressionKind::T, 4.0).with_order(NormOrder::StandardizeThenCompress),
        NormSpec::normal_norm(0.0).with_power_lambda(Some(0.7)),
    ]
}

/// Random `[rows, cols]` input whose entries all sit more than `1e-3`
/// (relative to the spread) from their group mean, where the compression and
/// power-transform branches meet; BatchNorm groups are columns.
pub fn smooth_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize, by_column: bool) -> Tensor<f64> {
    loop {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let groups: Vec<Vec<usize>> = if by_column {
            (0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect()
        } else {
            (0..rows).map(|r| (0..cols).map(|c| r * cols + c).collect()).collect()
        };
        let ok = groups.iter().all(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|&i| data[i]).sum::<f64>() / n;
            let sd = (g.iter().map(|&i| (data[i] - mean).powi(2)).sum::<f64>() / n).sqrt();
            g.iter().all(|&i| (data[i] - mean).abs() > 1e-3 * sd.max(1.0))
        });
        if ok {
            return Tensor::new(vec![rows, cols], data).expect("shape");
        }
    }
}

/// Worst relative error of one layer's backward (input, gamma and beta)
/// against central differences, over `inputs` random cases.
pub fn layer_grad_error(spec: NormSpec, inputs: usize, seed: u64) -> ibnorm_core::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (4, 6);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = smooth_input(&mut rng, rows, cols, spec.kind == NormKind::BatchNorm);
        let w = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let gamma = Tensor::vector((0..cols).map(|_| rng.random_range(0.5..1.5)).collect());
        let beta = Tensor::vector((0..cols).map(|_| rng.random_range(-0.5..0.5)).collect());
        let report = grad_check_inputs(
            |g: &mut Graph<f64>, v| {
                let a = AffineVars { gamma: v[1], beta: v[2] };
                let out = match spec.kind {
                    NormKind::LayerNorm => norm::layer_norm(g, v[0], &spec, Some(&a))?,
                    NormKind::RmsNorm => norm::rms_norm(g, v[0], &spec, Some(&a))?,
                    NormKind::BatchNorm => {
                        let mut stats = BatchStats::new(cols, 0.1);
                        norm::batch_norm(g, v[0], &spec, Some(&a), &mut stats)?
                    }
                    NormKind::IbNorm => norm::ibnorm(g, v[0], &spec, Some(&a))?,
                    NormKind::NormalNorm => norm::normal_norm::<f64, ChaCha8Rng>(g, v[0], &spec, Some(&a), None)?.0,
                };
                let wv = g.constant(w.clone());
                let p = g.mul(out, wv)?;
                g.sum(p)
            },
            &[x, gamma, beta],
            1e-5,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn norm_grad_check(_: Mutation) -> Outcome {
    let mut detail = Vec::new();
    for (i, spec) in grad_check_specs().into_iter().enumerate() {
        let err = layer_grad_error(spec, 50, 100 + i as u64).map_err(|e| (e.to_string(), json!({"spec": spec.label()})))?;
        if !(err < GRAD_TOLERANCE) {
            return Err((
                format!("{} backward disagrees with finite differences", spec.label()),
                json!({"spec": spec.label(), "max_rel_error": err}),
            ));
        }
        detail.push(format!("{} {err:.1e}", spec.label()));
    }
    Ok(detail.join(", "))
}

fn entropy_anchors(_: Mutation) -> Outcome {
    let err = |e: ibnorm_core::Error| (e.to_string(), json!(null));
    let same = Tensor::<f64>::from_rows(&vec![vec![0.3, -1.2, 2.0]; 8]).map_err(err)?;
    let h_same = matrix_entropy(&gram(&same, 1.0).map_err(err)?).map_err(err)?;
    if !(h_same.abs() <= 1e-10) {
        return Err(("identical points do not give zero entropy".into(), json!({"entropy": h_same})));
    }
    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 5] = 0.25);
    let h_eye = matrix_entropy(&GramMatrix::from_entries(4, eye, true).map_err(err)?).map_err(err)?;
    let onehot: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let h_far = matrix_entropy(&gram(&Tensor::from_rows(&onehot).map_err(err)?, 0.05).map_err(err)?).map_err(err)?;
    let ln4 = 4f64.ln();
    if !((h_eye - ln4).abs() <= 1e-9 && (h_far - ln4).abs() <= 1e-9) {
        return Err((
            "dissimilar points do not reach ln N".into(),
            json!({"identity_gram": h_eye, "orthogonal_points": h_far, "expected": ln4}),
        ));
    }
    Ok(format!("H(identical) = {h_same:.1e}, H(I/4) - ln 4 = {:.1e}", h_eye - ln4))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

fn gram_invariants(_: Mutation) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let n = rng.random_range(3..24);
        let d = rng.random_range(1..8);
        let sigma = 10f64.powf(rng.random_range(-0.5..0.5));
        let g = gram(&random_points(&mut rng, n, d), sigma).map_err(|e| (e.to_string(), json!({"case": case})))?;
        let eig = g.eigenvalues().map_err(|e| (e.to_string(), json!({"case": case})))?;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let h = matrix_entropy(&g).map_err(|e| (e.to_string(), json!({"case": case})))?;
        let ok = g.max_asymmetry() == 0.0
            && (g.trace() - 1.0).abs() <= 1e-12
            && min >= -1e-12
            && h >= -1e-12
            && h <= (n as f64).ln() + 1e-9;
        if !ok {
            return Err((
                "Gram matrix invariant violated".into(),
                json!({"case": case, "n": n, "asymmetry": g.max_asymmetry(), "trace": g.trace(), "min_eigenvalue": min, "entropy": h}),
            ));
        }
    }
    Ok("symmetric, unit trace, PSD and 0 <= H <= ln N on 100 random matrices".into())
}

fn mi_symmetry(_: Mutation) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..20 {
        let n = rng.random_range(4..20);
        let u = random_points(&mut rng, n, 3);
        let v = random_points(&mut rng, n, 5);
        let e = |e: ibnorm_core::Error| (e.to_string(), json!({"case": case}));
        let uv = mutual_information(&u, &v, 1.0, None).map_err(e)?;
        let vu = mutual_information(&v, &u, 1.0, None).map_err(e)?;
        if !((uv - vu).abs() <= 1e-12) {
            return Err(("I(U;V) != I(V;U)".into(), json!({"case": case, "uv": uv, "vu": vu})));
        }
    }
    Ok("20 random pairs".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_by_substring() {
        let r = run(Some("anchors"), Mutation::None);
        assert_eq!(r.checks.len(), 1);
        assert!(r.passed);
    }

    #[test]
    fn sign_mutation_breaks_the_jacobian_bound() {
        let r = run(Some("compression.jacobian"), Mutation::DerivativeSign);
        assert!(!r.passed);
        let w = r.checks[0].witness.as_ref().unwrap();
        assert_eq!(w["kind"], "L");
        assert!(w["derivative"].as_f64().unwrap() > w["bound"].as_f64().unwrap());
    }
}

use std::path::Path;
use std::process::{Command, Output};

use ibnorm_cli::manifest::RunManifest;
use ibnorm_core::info::IBTrace;
use ibnorm_harness::checkpoint::Checkpoint;
use ibnorm_harness::ExperimentConfig;

fn ibnorm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibnorm"))
        .args(args)
        .env("IBNORM_OUT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn compressed_column(o: &Output) -> Vec<f64> {
    stdout(o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn demo_compress_examples() {
    let dir = tempfile::tempdir().unwrap();
    let o = ibnorm(dir.path(), &["demo-compress", "--kind", "S", "--lambda", "4", "--values", "0,4,-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(compressed_column(&o), vec![0.0, 1.0, -1.0]);

    let o = ibnorm(dir.path(), &["demo-compress", "--kind", "T", "--lambda", "4", "--values", "2.5,2.5,2.5"]);
    assert_eq!(compressed_column(&o), vec![2.5; 3]);
    let m = RunManifest::load(&dir.path().join("demo-compress/manifest.json")).unwrap();
    assert_eq!((m.subcommand.as_str(), m.exit_status), ("demo-compress", Some(0)));
    assert_eq!(m.config["lambda"], 4.0);

    let o = ibnorm(dir.path(), &["demo-compress", "--kind", "S", "--values", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ibnorm(dir.path(), &["demo-compress", "--kind", "S", "--lambda", "-1", "--values", "1,2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn read_curve(path: &Path) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',').map(|v| v.parse::<f64>().unwrap());
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect()
}

const SWEEP: &str = r#"
seed = 3
n_samples = 20000
distributions = [{ name = "gaussian", mean = 0.0, std = 1.0 }]

[[specs]]
kind = "layer_norm"

[[specs]]
kind = "ib_norm"
compression = { kind = "L", lambda = 4.0 }

[[specs]]
kind = "ib_norm"
compression = { kind = "T", lambda = 4.0 }

[[specs]]
kind = "ib_norm"
compression = { kind = "S", lambda = 4.0 }
"#;

#[test]
fn kde_sweep_writes_one_curve_per_spec_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(&cfg, SWEEP).unwrap();
    let run = |out: &str| {
        let o = ibnorm(dir.path(), &["kde-sweep", cfg.to_str().unwrap(), "--out", dir.path().join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run("a");
    run("b");
    let mut curves: Vec<String> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("gaussian_"))
        .collect();
    curves.sort();
    assert_eq!(curves, ["gaussian_ibnorm-l4.csv", "gaussian_ibnorm-s4.csv", "gaussian_ibnorm-t4.csv", "gaussian_layernorm.csv"]);
    for f in curves.iter().map(String::as_str).chain(["moments.json"]) {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    // IBNorm-S and plain standardization give the same curve
    let (ln, s4) = (read_curve(&dir.path().join("a/gaussian_layernorm.csv")), read_curve(&dir.path().join("a/gaussian_ibnorm-s4.csv")));
    assert_eq!(ln.len(), s4.len());
    for (a, b) in ln.iter().zip(&s4) {
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9, "{a:?} vs {b:?}");
    }
    let m = RunManifest::load(&dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(m.artifacts.len(), 6);
    assert_eq!(m.config["n_samples"], 20000);
}

#[test]
fn kde_sweep_rejects_bad_configs_with_positions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, SWEEP.replace("\"gaussian\"", "\"cauchy\"")).unwrap();
    let o = ibnorm(dir.path(), &["kde-sweep", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("4:"), "{}", stderr(&o));
    let m = RunManifest::load(&dir.path().join("kde-sweep/manifest.json")).unwrap();
    assert_eq!(m.exit_status, Some(2));
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--topology", "mlp", "--steps", "6", "--eval-interval", "3", "--seed", "4", "--out", out];
    v.extend_from_slice(extra);
    v
}

fn run_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_file(&dir.join("config.toml")).unwrap()
}

#[test]
fn train_runs_differ_only_in_the_norm() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("ib"), dir.path().join("ln"));
    let o = ibnorm(dir.path(), &train_args(a.to_str().unwrap(), &["--norm", "ibnorm-l", "--lambda", "4"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ibnorm(dir.path(), &train_args(b.to_str().unwrap(), &["--norm", "layernorm"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let (mut ca, cb) = (run_config(&a), run_config(&b));
    assert_eq!(ca.model.norm.label(), "ibnorm-l4");
    ca.model.norm = cb.model.norm;
    ca.train.output_dir = cb.train.output_dir.clone();
    assert_eq!(ca, cb);

    let m = RunManifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(m.seed, Some(4));
    assert!(m.artifacts.iter().all(|p| p.exists()));
    assert_eq!(m.config["model"]["norm"]["compression"]["lambda"], 4.0);
}

#[test]
fn rerunning_the_resolved_config_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "batchnorm"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let before: Vec<Vec<u8>> =
        ["metrics.csv", "checkpoint.bin"].iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
    let copy = dir.path().join("resolved.toml");
    std::fs::copy(out.join("config.toml"), &copy).unwrap();
    let o = ibnorm(dir.path(), &["train", "--config", copy.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (f, b) in ["metrics.csv", "checkpoint.bin"].iter().zip(before) {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), b, "{f}");
    }
}

#[test]
fn no_affine_ablation_drops_norm_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "ibnorm-t", "--ablate", "no-affine"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert!(!ckpt.header.config.model.norm.affine);
    assert!(ckpt.header.arrays.iter().all(|a| !a.name.contains("gamma") && !a.name.contains("beta")));

    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "layernorm", "--ablate", "order"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lambda_grid_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "ibnorm-l", "--lambda-grid", "0.5,4,8"]));
    assert!(o.status.success(), "{}", stderr(&o));
    for l in ["0.5", "4", "8"] {
        let run = out.join(format!("lambda-{l}"));
        assert!(run.join("metrics.csv").exists());
        assert_eq!(run_config(&run).model.norm.compression.unwrap().lambda, l.parse::<f64>().unwrap());
    }
    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "layernorm", "--lambda-grid", "1,2"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "layernorm", "--lambda", "4"]));
    assert_eq!(o.status.code(), Some(2));
    let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", "groupnorm"]));
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\ntopology = \"mlp\"\ntask = \"synthetic_classification\"\nnorm = { kind = \"layer_norm\" }\n[train]\noptimizer = { kind = \"adamw\" }\nsteps = -3\n").unwrap();
    let o = ibnorm(dir.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 7, column 9"), "{}", stderr(&o));
}

#[test]
fn probe_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for norm in ["ibnorm-l", "layernorm"] {
        let out = dir.path().join(norm);
        let o = ibnorm(dir.path(), &train_args(out.to_str().unwrap(), &["--norm", norm]));
        assert!(o.status.success(), "{}", stderr(&o));
        ckpts.push(out.join("checkpoint.bin"));
    }
    let probe_out = dir.path().join("probe");
    let c: Vec<&str> = ckpts.iter().map(|p| p.to_str().unwrap()).collect();
    let o = ibnorm(dir.path(), &["probe-ib", c[0], c[1], "--batch", "32", "--out", probe_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traces: Vec<IBTrace> = ["00-ibnorm-l", "01-layernorm"]
        .iter()
        .map(|s| serde_json::from_slice(&std::fs::read(probe_out.join(format!("{s}.ib_trace.json"))).unwrap()).unwrap())
        .collect();
    assert!(traces.iter().all(|t| t.beta == 1.0 && t.sigma == 1.0 && t.n_layers == 3));
    assert!(probe_out.join("01-layernorm.ib_trace.csv").exists());
    let m = RunManifest::load(&probe_out.join("manifest.json")).unwrap();
    assert_eq!(m.config["options"]["sigma"], 1.0);
    assert_eq!(m.config["options"]["beta"], 1.0);

    let zero = dir.path().join("probe0");
    let o = ibnorm(dir.path(), &["probe-ib", c[0], "--beta", "0", "--batch", "32", "--out", zero.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t: IBTrace = serde_json::from_slice(&std::fs::read(zero.join("00-ibnorm-l.ib_trace.json")).unwrap()).unwrap();
    let sum_iy: f64 = t.entries.iter().map(|e| e.i_y).sum::<f64>() / t.n_timesteps as f64;
    assert!((t.ib_value - sum_iy).abs() < 1e-12);
}

#[test]
fn verify_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = ibnorm(dir.path(), &["verify"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("verify/verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 9);

    let o = ibnorm(dir.path(), &["verify", "--filter", "compression"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().all(|l| l.contains(" compression.")));
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = ibnorm(dir.path(), &["verify", "--filter", "jacobian", "--mutate", "derivative-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("compression.jacobian_bound"));
    assert!(stderr(&o).contains("\"derivative\""), "{}", stderr(&o));

    let o = ibnorm(dir.path(), &["verify", "--filter", "nothing-matches"]);
    assert_eq!(o.status.code(), Some(2));
}

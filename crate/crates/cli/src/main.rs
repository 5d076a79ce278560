
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use ibnorm_cli::manifest::{write_atomic, RunManifest};
use ibnorm_cli::sweep::{file_label, run_sweep, SweepConfig};
use ibnorm_cli::verify::{self, Mutation};
use ibnorm_cli::{exit_code, PropertyFailure, UsageError};
use ibnorm_core::analysis::InputDistribution;
use ibnorm_core::compression::{compress_slice, CompressionParams};
use ibnorm_core::{CompressionKind, NormKind, NormOrder, NormSpec};
use ibnorm_harness::checkpoint::Checkpoint;
use ibnorm_harness::{
    probe_checkpoint, train, ExperimentConfig, ModelSpec, OptimizerConfig, ProbeOptions, TrainConfig,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ibnorm", version, about = "Compression-based normalization: demos, sweeps, training, IB probes")]
struct Cli {
    /// Root for default output directories.
    #[arg(long, env = "IBNORM_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress one group of values and print each stage.
    DemoCompress(DemoArgs),
    /// Density curves and moments of normalized samples.
    KdeSweep(SweepArgs),
    /// Train an MLP or the tiny transformer.
    Train(TrainArgs),
    /// Token-level IB value of one or more checkpoints.
    ProbeIb(ProbeArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["values", "sample"])))]
struct DemoArgs {
    /// Compression kind: S, L or T.
    #[arg(long)]
    kind: CompressionKind,
    #[arg(long)]
    lambda: f64,
    /// Comma-separated group of values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Vec<f64>,
    /// Draw this many standard-normal values instead.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML sweep configuration.
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Mlp,
    TinyTransformer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Standardize before compressing.
    Order,
    /// Drop the learnable affine step.
    NoAffine,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    topology: Option<TopologyArg>,
    /// layernorm, rmsnorm, batchnorm, normalnorm, ibnorm-s, ibnorm-l, ibnorm-t.
    #[arg(long)]
    norm: Option<String>,
    /// Compression strength for IBNorm.
    #[arg(long)]
    lambda: Option<f64>,
    /// One run per value, e.g. `0.5,4,8`.
    #[arg(long, value_delimiter = ',', conflicts_with = "lambda")]
    lambda_grid: Vec<f64>,
    #[arg(long)]
    ablate: Option<Ablation>,
    /// Train only the normalization parameters.
    #[arg(long)]
    freeze_except_norm: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    /// Text file for char-LM runs instead of the bundled corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Gaussian kernel bandwidth.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Held-out examples per timestep.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Sampled positions per window (char-LM).
    #[arg(long, default_value_t = 30)]
    timesteps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only checks whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    /// Inject a known fault to confirm the suite catches it.
    #[arg(long, default_value = "none")]
    mutate: Mutation,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (name, dir) = match &cli.command {
        Command::DemoCompress(a) => ("demo-compress", a.out.clone()),
        Command::KdeSweep(a) => ("kde-sweep", a.out.clone()),
        Command::Train(a) => ("train", a.out.clone()),
        Command::ProbeIb(a) => ("probe-ib", a.out.clone()),
        Command::Verify(a) => ("verify", a.out.clone()),
    };
    let mut manifest = RunManifest::begin(name);
    let mut dir = dir.unwrap_or_else(|| cli.out_root.join(name));
    let result = match &cli.command {
        Command::DemoCompress(a) => demo_compress(a, &mut manifest),
        Command::KdeSweep(a) => kde_sweep(a, &dir, &mut manifest),
        Command::Train(a) => train_cmd(a, &cli.out_root, &mut dir, &mut manifest),
        Command::ProbeIb(a) => probe_ib(a, &dir, &mut manifest),
        Command::Verify(a) => verify_cmd(a, &dir, &mut manifest),
    };
    let code = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    let finished = manifest.finish(&dir, code);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    match finished {
        Ok(path) => log::info!("manifest: {}", path.display()),
        Err(e) => {
            eprintln!("error: writing manifest: {e:#}");
            if code == 0 {
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::from(code as u8)
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Serialize)]
struct DemoConfig<'a> {
    kind: CompressionKind,
    lambda: f64,
    values: &'a [f64],
    csv: Option<&'a Path>,
}

fn demo_compress(args: &DemoArgs, manifest: &mut RunManifest) -> Result<()> {
    let values = match args.sample {
        Some(n) => InputDistribution::Gaussian { mean: 0.0, std: 1.0 }
            .sample(n, args.seed)
            .map_err(|e| usage(e.to_string()))?,
        None => args.values.clone(),
    };
    if values.is_empty() {
        return Err(usage("no values to compress"));
    }
    let params = CompressionParams::new(args.kind, args.lambda, values.len()).map_err(|e| usage(e.to_string()))?;
    manifest.set_config(&DemoConfig {
        kind: args.kind,
        lambda: args.lambda,
        values: &values,
        csv: args.csv.as_deref(),
    })?;
    if args.sample.is_some() {
        manifest.seed = Some(args.seed);
    }
    let out = compress_slice(&values, &params)?;
    let mu = values.iter().sum::<f64>() / values.len() as f64;
    let mut csv = String::from("input,mu,deviation,compressed\n");
    println!("{:>14} {:>14} {:>14} {:>14}", "input", "mu", "deviation", "compressed");
    for (x, y) in values.iter().zip(&out) {
        println!("{x:>14} {mu:>14} {:>14} {y:>14}", x - mu);
        csv.push_str(&format!("{x},{mu},{},{y}\n", x - mu));
    }
    if let Some(path) = &args.csv {
        write_atomic(path, csv.as_bytes())?;
        manifest.artifact(path);
    }
    Ok(())
}

fn kde_sweep(args: &SweepArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let mut cfg = SweepConfig::from_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_samples {
        cfg.n_samples = n;
    }
    cfg.validate()?;
    manifest.set_config(&cfg)?;
    manifest.seed = Some(cfg.seed);
    let resolved = dir.join("sweep.toml");
    write_atomic(&resolved, toml::to_string(&cfg)?.as_bytes())?;
    manifest.artifact(&resolved);
    for path in run_sweep(&cfg, dir)? {
        println!("{}", path.display());
        manifest.artifact(path);
    }
    Ok(())
}

/// Default when no config file is given: the char-LM desk task.
fn desk_config() -> ExperimentConfig {
    let mut train = TrainConfig::new(0, OptimizerConfig::adamw(3e-3));
    train.batch_size = 8;
    train.steps = 2000;
    train.eval_interval = 250;
    ExperimentConfig {
        model: ModelSpec::tiny_transformer(NormSpec::layer_norm()),
        train,
    }
}

fn set_lambda(spec: &mut NormSpec, lambda: f64) -> Result<()> {
    match spec.compression.as_mut() {
        Some(c) if spec.kind == NormKind::IbNorm => {
            c.lambda = lambda;
            Ok(())
        }
        _ => Err(usage(format!("--lambda applies to IBNorm only, not {}", spec.label()))),
    }
}

fn resolve_train(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => desk_config(),
    };
    if let Some(t) = args.topology {
        let norm = cfg.model.norm;
        cfg.model = match t {
            TopologyArg::Mlp => ModelSpec::mlp(norm),
            TopologyArg::TinyTransformer => ModelSpec::tiny_transformer(norm),
        };
    }
    if let Some(name) = &args.norm {
        cfg.model.norm = name.parse().map_err(|e: ibnorm_core::Error| usage(e.to_string()))?;
    }
    if let Some(l) = args.lambda {
        set_lambda(&mut cfg.model.norm, l)?;
    }
    match args.ablate {
        Some(Ablation::Order) if cfg.model.norm.kind != NormKind::IbNorm => {
            return Err(usage("--ablate order needs an IBNorm layer"));
        }
        Some(Ablation::Order) => cfg.model.norm = cfg.model.norm.with_order(NormOrder::StandardizeThenCompress),
        Some(Ablation::NoAffine) => cfg.model.norm = cfg.model.norm.with_affine(false),
        None => {}
    }
    let t = &mut cfg.train;
    if let Some(kind) = args.optimizer {
        let lr = t.optimizer.learning_rate;
        t.optimizer = match kind {
            OptimizerArg::Adamw => OptimizerConfig::adamw(lr),
            OptimizerArg::Sgd => OptimizerConfig::sgd(lr, 0.9),
        };
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.optimizer.learning_rate = v;
    }
    if let Some(v) = args.warmup {
        t.warmup_steps = v;
    }
    if let Some(v) = args.eval_interval {
        t.eval_interval = v;
    }
    if let Some(p) = &args.corpus {
        t.data.corpus = Some(p.clone());
    }
    if args.freeze_except_norm {
        t.freeze_except_norm = true;
    }
    if !args.lambda_grid.is_empty() && cfg.model.norm.kind != NormKind::IbNorm {
        return Err(usage("--lambda-grid needs an IBNorm layer"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_one(mut cfg: ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    cfg.train.output_dir = Some(dir.to_path_buf());
    cfg.validate()?;
    let resolved = dir.join("config.toml");
    write_atomic(&resolved, cfg.to_toml()?.as_bytes())?;
    manifest.artifact(&resolved);
    let outcome = train(&cfg.model, &cfg.train)?;
    let last = outcome.metrics.last().context("no metrics recorded")?;
    println!(
        "{} seed {}: step {} eval_loss {:.5}{}",
        cfg.model.norm,
        cfg.train.seed,
        last.step,
        last.eval_loss,
        last.eval_accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default()
    );
    for f in [ibnorm_harness::train::METRICS_FILE, ibnorm_harness::train::TIMING_FILE] {
        manifest.artifact(dir.join(f));
    }
    if let Some(p) = outcome.checkpoint_path {
        manifest.artifact(p);
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs, root: &Path, dir: &mut PathBuf, manifest: &mut RunManifest) -> Result<()> {
    let cfg = resolve_train(args)?;
    manifest.seed = Some(cfg.train.seed);
    if args.out.is_none() {
        *dir = root
            .join("train")
            .join(format!("{}-seed{}", file_label(&cfg.model.norm), cfg.train.seed));
    }
    if args.lambda_grid.is_empty() {
        manifest.set_config(&cfg)?;
        return run_one(cfg, dir, manifest);
    }
    let mut runs = Vec::new();
    for &lambda in &args.lambda_grid {
        let mut c = cfg.clone();
        set_lambda(&mut c.model.norm, lambda)?;
        c.train.output_dir = Some(dir.join(format!("lambda-{lambda}")));
        runs.push(c);
    }
    manifest.set_config(&runs)?;
    for c in runs {
        let sub = c.train.output_dir.clone().expect("set above");
        run_one(c, &sub, manifest)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeConfig<'a> {
    options: ProbeOptions,
    checkpoints: &'a [PathBuf],
}

/// Output stem for a checkpoint: its parent directory name, else its stem.
fn probe_stem(path: &Path, index: usize) -> String {
    let parent = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let base = parent.or(stem).unwrap_or_else(|| "checkpoint".into());
    format!("{index:02}-{base}")
}

fn probe_ib(args: &ProbeArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let options = ProbeOptions {
        beta: args.beta,
        sigma: args.sigma,
        batch: args.batch,
        timesteps: args.timesteps,
        all_active_mask: false,
    };
    manifest.set_config(&ProbeConfig {
        options,
        checkpoints: &args.checkpoints,
    })?;
    if !(args.sigma > 0.0) || !args.beta.is_finite() {
        return Err(usage("--sigma must be positive and --beta finite"));
    }
    for (i, path) in args.checkpoints.iter().enumerate() {
        let ckpt = Checkpoint::load(path)?;
        let trace = probe_checkpoint(&ckpt, &options).with_context(|| format!("probing {}", path.display()))?;
        let stem = probe_stem(path, i);
        let json = dir.join(format!("{stem}.ib_trace.json"));
        let csv = dir.join(format!("{stem}.ib_trace.csv"));
        write_atomic(&json, trace.to_json()?.as_bytes())?;
        write_atomic(&csv, trace.to_csv().as_bytes())?;
        println!("{}\t{}\tib_value {:.6}", path.display(), ckpt.header.config.model.norm, trace.ib_value);
        manifest.artifact(json);
        manifest.artifact(csv);
    }
    Ok(())
}

fn verify_cmd(args: &VerifyArgs, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    #[derive(Serialize)]
    struct VerifyConfig<'a> {
        filter: Option<&'a str>,
        mutation: Mutation,
    }
    manifest.set_config(&VerifyConfig {
        filter: args.filter.as_deref(),
        mutation: args.mutate,
    })?;
    if let Some(f) = &args.filter {
        if !verify::check_names().iter().any(|n| n.contains(f.as_str())) {
            bail!(UsageError(format!(
                "no check matches `{f}`; available: {}",
                verify::check_names().join(", ")
            )));
        }
    }
    let report = verify::run(args.filter.as_deref(), args.mutate);
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {} ({:.0} ms): {}", c.name, c.elapsed_ms, c.detail);
    }
    let path = dir.join("verify_report.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&report)?)?;
    manifest.artifact(&path);
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    for f in &failures {
        eprintln!(
            "{}: {}",
            f.name,
            f.witness.as_ref().map(|w| w.to_string()).unwrap_or_default()
        );
    }
    Err(PropertyFailure(failures.iter().map(|f| f.name.clone()).collect()).into())
}

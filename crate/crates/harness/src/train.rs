//! Training loop, evaluation and metric logging.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ibnorm_core::autodiff::{Graph, Tensor};
use ibnorm_core::norm::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ModelSpec, TrainConfig};
use crate::data::{make_dataset, Batch, Dataset, Split};
use crate::error::{io_err, HarnessError, Result};
use crate::model::Model;
use crate::optim::{learning_rate, Optimizer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";
pub const METRICS_HEADER: &str = "step,lr,train_loss,eval_loss,eval_accuracy,eval_perplexity";

/// RNG stream ids derived from the run seed.
pub const STREAM_DATASET: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_BATCHES: u64 = 3;
pub const STREAM_NOISE: u64 = 4;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous row (absent at step 0).
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_perplexity: Option<f64>,
    /// Wall-clock milliseconds since training started; logged separately so
    /// the metric stream itself is reproducible.
    pub wall_ms: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            opt(self.train_loss),
            self.eval_loss,
            opt(self.eval_accuracy),
            opt(self.eval_perplexity)
        )
    }
}

/// Loss and task metric of the model on a split's fixed evaluation batch.
pub fn evaluate_model(model: &mut Model, data: &Dataset, split: Split) -> Result<(f64, Option<f64>, Option<f64>)> {
    let batch = data.fixed_batch(split);
    let mut g = Graph::new();
    let (_, pass, loss) = model.loss(&mut g, &batch, Mode::Eval, None)?;
    let loss = g.value(loss).item().expect("scalar loss");
    Ok(match batch {
        Batch::Classification { y, .. } => {
            let logits = g.value(pass.logits);
            let correct = y
                .iter()
                .enumerate()
                .filter(|(r, &c)| argmax(logits.row(*r)) == c)
                .count();
            (loss, Some(correct as f64 / y.len() as f64), None)
        }
        Batch::Tokens { .. } => (loss, None, Some(loss.exp())),
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// A model in training, with everything needed to resume it.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed optimizer steps.
    pub step: usize,
    pub batch_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    /// Hash chain over every sampled batch's indices.
    pub batch_digest: [u8; 32],
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let data = make_dataset(config.model.task, &config.train.data, config.model.context, seed)?;
        let mut init = stream(seed, STREAM_INIT);
        let mut model = Model::new(&config.model, &data, &mut init)?;
        if config.train.freeze_except_norm {
            model.freeze_except_norm();
        }
        let optimizer = Optimizer::new(config.train.optimizer, &model.params);
        Ok(Self {
            data,
            model,
            optimizer,
            step: 0,
            batch_rng: stream(seed, STREAM_BATCHES),
            noise_rng: stream(seed, STREAM_NOISE),
            batch_digest: [0; 32],
            config,
        })
    }

    pub fn lr(&self) -> f64 {
        let t = &self.config.train;
        learning_rate(&t.optimizer, self.step, t.warmup_steps, t.steps)
    }

    pub fn batch_digest_hex(&self) -> String {
        hex::encode(self.batch_digest)
    }

    /// One forward/backward/update on a fresh training batch; returns the
    /// batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let lr = self.lr();
        let (batch, idx) = self.data.sample_train(self.config.train.batch_size, &mut self.batch_rng);
        let mut h = Sha256::new();
        h.update(self.batch_digest);
        for i in &idx {
            h.update((*i as u64).to_le_bytes());
        }
        self.batch_digest = h.finalize().into();

        let mut g = Graph::new();
        let (bound, pass, loss) = self.model.loss(&mut g, &batch, Mode::Train, Some(&mut self.noise_rng))?;
        let value = g.value(loss).item().expect("scalar loss");
        if !value.is_finite() {
            let dump = self.write_nan_dump(&g, &pass, value, &idx)?;
            return Err(HarnessError::NonFiniteLoss { step: self.step, dump });
        }
        let grads = g.backward(loss)?;
        let per_param: Vec<Option<&Tensor<f64>>> = bound.vars.iter().map(|&v| grads.get(v)).collect();
        self.optimizer.step(&mut self.model.params, &per_param, lr);
        self.step += 1;
        Ok(value)
    }

    pub fn evaluate(&mut self, split: Split) -> Result<(f64, Option<f64>, Option<f64>)> {
        evaluate_model(&mut self.model, &self.data, split)
    }

    fn write_nan_dump(&self, g: &Graph<f64>, pass: &crate::model::ForwardPass, loss: f64, idx: &[usize]) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct SiteStats {
            name: String,
            min: f64,
            max: f64,
            mean: f64,
            non_finite: usize,
        }
        let stats = |name: String, t: &Tensor<f64>| {
            let finite: Vec<f64> = t.data().iter().copied().filter(|v| v.is_finite()).collect();
            SiteStats {
                name,
                min: finite.iter().copied().fold(f64::INFINITY, f64::min),
                max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
                non_finite: t.numel() - finite.len(),
            }
        };
        let mut layers = vec![stats("input".into(), g.value(pass.input_rep))];
        for (site, &v) in self.model.sites().iter().zip(&pass.site_reps) {
            layers.push(stats(site.name.clone(), g.value(v)));
        }
        layers.push(stats("logits".into(), g.value(pass.logits)));
        let body = serde_json::json!({
            "step": self.step,
            "loss": loss.to_string(),
            "batch_indices": idx,
            "layers": layers,
            "config": self.config,
        });
        let dir = self
            .config
            .train
            .output_dir
            .clone()
            .unwrap_or_else(std::env::temp_dir);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(NAN_DUMP_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(io_err(&path))?;
        log::error!("non-finite loss at step {}; dump at {}", self.step, path.display());
        Ok(path)
    }
}

/// Result of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run: Run,
    pub metrics: Vec<MetricRow>,
    pub checkpoint_path: Option<PathBuf>,
}

struct MetricSink {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    metrics_path: PathBuf,
    timing_path: PathBuf,
}

impl MetricSink {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let metrics_path = dir.join(METRICS_FILE);
        let timing_path = dir.join(TIMING_FILE);
        let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
        let mut timing = BufWriter::new(File::create(&timing_path).map_err(io_err(&timing_path))?);
        writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
        writeln!(timing, "step,wall_ms").map_err(io_err(&timing_path))?;
        Ok(Self {
            metrics,
            timing,
            metrics_path,
            timing_path,
        })
    }

    fn push(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.csv_line()).map_err(io_err(&self.metrics_path))?;
        writeln!(self.timing, "{},{}", row.step, row.wall_ms).map_err(io_err(&self.timing_path))?;
        self.metrics.flush().map_err(io_err(&self.metrics_path))?;
        self.timing.flush().map_err(io_err(&self.timing_path))
    }
}

/// Trains from scratch, evaluating at step 0, every `eval_interval` steps and
/// at the end. With an output directory, streams `metrics.csv` and
/// `timing.csv` and saves `checkpoint.bin` there.
pub fn train(model: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let config = ExperimentConfig {
        model: model.clone(),
        train: cfg.clone(),
    };
    let mut run = Run::new(config)?;
    let mut sink = cfg.output_dir.as_deref().map(MetricSink::create).transpose()?;
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut pending = Vec::new();

    let mut record = |run: &mut Run, pending: &mut Vec<f64>, lr: f64| -> Result<MetricRow> {
        let (eval_loss, eval_accuracy, eval_perplexity) = run.evaluate(Split::Eval)?;
        let train_loss = (!pending.is_empty()).then(|| pending.iter().sum::<f64>() / pending.len() as f64);
        pending.clear();
        let row = MetricRow {
            step: run.step,
            lr,
            train_loss,
            eval_loss,
            eval_accuracy,
            eval_perplexity,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(s) = sink.as_mut() {
            s.push(&row)?;
        }
        log::info!("step {} eval_loss {:.4} train_loss {}", row.step, row.eval_loss, opt(row.train_loss));
        Ok(row)
    };

    let lr0 = run.lr();
    metrics.push(record(&mut run, &mut pending, lr0)?);
    while run.step < cfg.steps {
        let lr = run.lr();
        pending.push(run.train_step()?);
        if run.step % cfg.eval_interval == 0 || run.step == cfg.steps {
            metrics.push(record(&mut run, &mut pending, lr)?);
        }
    }

    let checkpoint_path = match &cfg.output_dir {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_FILE);
            crate::checkpoint::Checkpoint::from_run(&run)?.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        run,
        metrics,
        checkpoint_path,
    })
}

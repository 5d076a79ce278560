//! Single-file checkpoints: one line of compact JSON (names, shapes, config
//! digest, RNG state) followed by raw little-endian `f64` arrays in header
//! order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::error::{io_err, HarnessError, Result};
use crate::train::{evaluate_model, MetricRow, Run};

pub const FORMAT: &str = "ibnorm-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Param,
    Buffer,
    OptimizerFirst,
    OptimizerSecond,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ArrayKind,
    /// Set for parameters only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| HarnessError::Checkpoint(format!("rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed is not hex"))?
            .try_into()
            .map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub step: usize,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub batch_rng: RngState,
    pub noise_rng: RngState,
    pub batch_digest: String,
    pub optimizer_t: u64,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_run(run: &Run) -> Result<Self> {
        let mut arrays = Vec::new();
        let mut data = Vec::new();
        for p in run.model.params.iter() {
            arrays.push(ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                kind: ArrayKind::Param,
                trainable: Some(p.trainable),
            });
            data.push(p.value.data().to_vec());
        }
        for (name, t) in run.model.buffers() {
            arrays.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                kind: ArrayKind::Buffer,
                trainable: None,
            });
            data.push(t.data().to_vec());
        }
        let opt = &run.optimizer;
        for (kind, states) in [(ArrayKind::OptimizerFirst, &opt.first), (ArrayKind::OptimizerSecond, &opt.second)] {
            for (p, s) in run.model.params.iter().zip(states) {
                if s.is_empty() {
                    continue;
                }
                arrays.push(ArrayEntry {
                    name: p.name.clone(),
                    shape: vec![s.len()],
                    kind,
                    trainable: None,
                });
                data.push(s.clone());
            }
        }
        Ok(Self {
            header: CheckpointHeader {
                format: FORMAT.into(),
                step: run.step,
                config_digest: run.config.digest(),
                config: run.config.clone(),
                batch_rng: RngState::capture(&run.batch_rng),
                noise_rng: RngState::capture(&run.noise_rng),
                batch_digest: run.batch_digest_hex(),
                optimizer_t: opt.t,
                arrays,
            },
            data,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for arr in &self.data {
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| HarnessError::Checkpoint("missing header terminator".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT {
            return Err(HarnessError::Checkpoint(format!("unsupported format `{}`", header.format)));
        }
        if header.config.digest() != header.config_digest {
            return Err(HarnessError::Checkpoint("config digest does not match the embedded config".into()));
        }
        let mut body = &bytes[nl + 1..];
        let mut data = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            if body.len() < n * 8 {
                return Err(HarnessError::Checkpoint(format!("truncated array `{}`", a.name)));
            }
            let (chunk, rest) = body.split_at(n * 8);
            data.push(
                chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            );
            body = rest;
        }
        if !body.is_empty() {
            return Err(HarnessError::Checkpoint(format!("{} trailing bytes", body.len())));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Array by kind and name.
    pub fn array(&self, kind: ArrayKind, name: &str) -> Option<&[f64]> {
        self.header
            .arrays
            .iter()
            .position(|a| a.kind == kind && a.name == name)
            .map(|i| self.data[i].as_slice())
    }

    /// Rebuilds the run: same config, then every stored array, counter and
    /// RNG position.
    pub fn restore(&self) -> Result<Run> {
        let mut run = Run::new(self.header.config.clone())?;
        let missing = |n: &str| HarnessError::Checkpoint(format!("array `{n}` missing or misshapen"));
        for i in 0..run.model.params.len() {
            let name = run.model.params.get(i).name.clone();
            let entry = self
                .header
                .arrays
                .iter()
                .position(|a| a.kind == ArrayKind::Param && a.name == name)
                .ok_or_else(|| missing(&name))?;
            let p = run.model.params.get_mut(i);
            if self.header.arrays[entry].shape != p.value.shape() {
                return Err(missing(&name));
            }
            p.value.data_mut().copy_from_slice(&self.data[entry]);
            p.trainable = self.header.arrays[entry].trainable.unwrap_or(true);
        }
        for (name, t) in run.model.buffers_mut() {
            let src = self.array(ArrayKind::Buffer, &name).ok_or_else(|| missing(&name))?;
            if src.len() != t.numel() {
                return Err(missing(&name));
            }
            t.data_mut().copy_from_slice(src);
        }
        let names: Vec<String> = run.model.params.iter().map(|p| p.name.clone()).collect();
        for (kind, states) in [
            (ArrayKind::OptimizerFirst, &mut run.optimizer.first),
            (ArrayKind::OptimizerSecond, &mut run.optimizer.second),
        ] {
            for (name, s) in names.iter().zip(states.iter_mut()) {
                if s.is_empty() {
                    continue;
                }
                let src = self.array(kind, name).ok_or_else(|| missing(name))?;
                if src.len() != s.len() {
                    return Err(missing(name));
                }
                s.copy_from_slice(src);
            }
        }
        run.optimizer.t = self.header.optimizer_t;
        run.step = self.header.step;
        run.batch_rng = self.header.batch_rng.restore()?;
        run.noise_rng = self.header.noise_rng.restore()?;
        run.batch_digest = hex::decode(&self.header.batch_digest)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| HarnessError::Checkpoint("batch digest is not 32 hex bytes".into()))?;
        Ok(run)
    }
}

/// Evaluates a checkpoint on a split.
pub fn evaluate(checkpoint: &Checkpoint, split: Split) -> Result<MetricRow> {
    let mut run = checkpoint.restore()?;
    let (eval_loss, eval_accuracy, eval_perplexity) = evaluate_model(&mut run.model, &run.data, split)?;
    Ok(MetricRow {
        step: run.step,
        lr: run.lr(),
        train_loss: None,
        eval_loss,
        eval_accuracy,
        eval_perplexity,
        wall_ms: 0,
    })
}

//! Synthetic Gaussian-mixture classification and character-level language
//! modelling data.

use std::path::Path;

use ibnorm_core::autodiff::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DataSpec, Task};
use crate::error::{io_err, HarnessError, Result};

/// Roughly 1.1 MB of public-domain English prose (four Project Gutenberg
/// texts), CRs stripped.
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

/// One minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Classification { x: Tensor<f64>, y: Vec<usize> },
    /// `batch` windows of `seq` tokens, flattened row-major.
    Tokens {
        inputs: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
        seq: usize,
    },
}

impl Batch {
    pub fn targets(&self) -> &[usize] {
        match self {
            Batch::Classification { y, .. } => y,
            Batch::Tokens { targets, .. } => targets,
        }
    }

    /// Number of independent examples (points or windows).
    pub fn len(&self) -> usize {
        match self {
            Batch::Classification { y, .. } => y.len(),
            Batch::Tokens { batch, .. } => *batch,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationData {
    pub dim: usize,
    pub classes: usize,
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub eval_x: Vec<f64>,
    pub eval_y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharLmData {
    pub vocab: Vec<char>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub context: usize,
    pub eval_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Classification(ClassificationData),
    CharLm(CharLmData),
}

/// Class means `(separation * noise_std / sqrt 2) * e_c`, so every pair of
/// means is `separation` standard deviations apart.
fn gaussian_mixture(spec: &DataSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let offset = spec.separation * spec.noise_std / std::f64::consts::SQRT_2;
    let mut x = Vec::with_capacity(n * spec.dim);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..spec.classes);
        for j in 0..spec.dim {
            let mean = if j == c % spec.dim { offset } else { 0.0 };
            x.push(mean + noise.sample(rng));
        }
        y.push(c);
    }
    (x, y)
}

fn char_lm(text: &str, spec: &DataSpec, context: usize) -> Result<CharLmData> {
    let mut vocab: Vec<char> = text.chars().collect();
    vocab.sort_unstable();
    vocab.dedup();
    let ids: Vec<usize> = text
        .chars()
        .map(|c| vocab.binary_search(&c).expect("char in vocab"))
        .collect();
    let n_eval = ((ids.len() as f64) * spec.eval_fraction).round() as usize;
    let split = ids.len() - n_eval;
    let (train, eval) = (ids[..split].to_vec(), ids[split..].to_vec());
    for (name, part) in [("train", &train), ("eval", &eval)] {
        if part.len() < context + 2 {
            return Err(HarnessError::Config(format!(
                "{name} split has {} characters, need at least {} for context {context}",
                part.len(),
                context + 2
            )));
        }
    }
    Ok(CharLmData {
        vocab,
        train,
        eval,
        context,
        eval_windows: spec.eval_windows,
    })
}

/// Reads a corpus file; empty files are reported as I/O errors.
pub fn read_corpus(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.is_empty() {
        return Err(HarnessError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "corpus file is empty"),
        });
    }
    Ok(text.replace('\r', ""))
}

/// Builds train/eval splits. The synthetic split depends only on `seed`; the
/// text split is the contiguous tail of the corpus.
pub fn make_dataset(task: Task, spec: &DataSpec, context: usize, seed: u64) -> Result<Dataset> {
    match task {
        Task::SyntheticClassification => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(crate::STREAM_DATASET);
            let (train_x, train_y) = gaussian_mixture(spec, spec.n_train, &mut rng);
            let (eval_x, eval_y) = gaussian_mixture(spec, spec.n_eval, &mut rng);
            Ok(Dataset::Classification(ClassificationData {
                dim: spec.dim,
                classes: spec.classes,
                train_x,
                train_y,
                eval_x,
                eval_y,
            }))
        }
        Task::CharLm => {
            let text = match &spec.corpus {
                Some(p) => read_corpus(p)?,
                None => BUNDLED_CORPUS.to_string(),
            };
            Ok(Dataset::CharLm(char_lm(&text, spec, context)?))
        }
    }
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Classification(_) => Task::SyntheticClassification,
            Dataset::CharLm(_) => Task::CharLm,
        }
    }

    /// Input width (features) or vocabulary size.
    pub fn input_size(&self) -> usize {
        match self {
            Dataset::Classification(d) => d.dim,
            Dataset::CharLm(d) => d.vocab.len(),
        }
    }

    pub fn output_size(&self) -> usize {
        match self {
            Dataset::Classification(d) => d.classes,
            Dataset::CharLm(d) => d.vocab.len(),
        }
    }

    /// Random training batch; returns the batch and the sampled indices
    /// (points or window offsets).
    pub fn sample_train(&self, batch: usize, rng: &mut ChaCha8Rng) -> (Batch, Vec<usize>) {
        match self {
            Dataset::Classification(d) => {
                let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..d.train_y.len())).collect();
                (classification_batch(d.dim, &d.train_x, &d.train_y, &idx), idx)
            }
            Dataset::CharLm(d) => {
                let hi = d.train.len() - d.context - 1;
                let starts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=hi)).collect();
                (token_batch(&d.train, d.context, &starts), starts)
            }
        }
    }

    /// The fixed evaluation set of a split: every eval point, or
    /// `eval_windows` evenly spaced windows.
    pub fn fixed_batch(&self, split: Split) -> Batch {
        match self {
            Dataset::Classification(d) => {
                let (x, y) = match split {
                    Split::Train => (&d.train_x, &d.train_y),
                    Split::Eval => (&d.eval_x, &d.eval_y),
                };
                let idx: Vec<usize> = (0..y.len()).collect();
                classification_batch(d.dim, x, y, &idx)
            }
            Dataset::CharLm(d) => {
                let stream = match split {
                    Split::Train => &d.train,
                    Split::Eval => &d.eval,
                };
                let span = stream.len() - d.context - 1;
                let starts: Vec<usize> = (0..d.eval_windows).map(|i| i * span / (d.eval_windows - 1)).collect();
                token_batch(stream, d.context, &starts)
            }
        }
    }

    /// The first `n` examples of [`Self::fixed_batch`].
    pub fn probe_batch(&self, split: Split, n: usize) -> Batch {
        match self.fixed_batch(split) {
            Batch::Classification { x, y } => {
                let n = n.min(y.len());
                let d = x.last_dim();
                Batch::Classification {
                    x: Tensor::new(vec![n, d], x.data()[..n * d].to_vec()).expect("prefix shape"),
                    y: y[..n].to_vec(),
                }
            }
            Batch::Tokens {
                inputs,
                targets,
                batch,
                seq,
            } => {
                let n = n.min(batch);
                Batch::Tokens {
                    inputs: inputs[..n * seq].to_vec(),
                    targets: targets[..n * seq].to_vec(),
                    batch: n,
                    seq,
                }
            }
        }
    }
}

fn classification_batch(dim: usize, x: &[f64], y: &[usize], idx: &[usize]) -> Batch {
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(&x[i * dim..(i + 1) * dim]);
    }
    Batch::Classification {
        x: Tensor::new(vec![idx.len(), dim], data).expect("batch shape"),
        y: idx.iter().map(|&i| y[i]).collect(),
    }
}

fn token_batch(stream: &[usize], seq: usize, starts: &[usize]) -> Batch {
    let mut inputs = Vec::with_capacity(starts.len() * seq);
    let mut targets = Vec::with_capacity(starts.len() * seq);
    for &s in starts {
        inputs.extend_from_slice(&stream[s..s + seq]);
        targets.extend_from_slice(&stream[s + 1..s + seq + 1]);
    }
    Batch::Tokens {
        inputs,
        targets,
        batch: starts.len(),
        seq,
    }
}

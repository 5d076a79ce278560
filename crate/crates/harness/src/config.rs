//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [model]
//! topology = "tiny_transformer"
//! task = "char_lm"
//! norm = { kind = "ib_norm", compression = { kind = "L", lambda = 4.0 } }
//!
//! [train]
//! seed = 1
//! steps = 2000
//! optimizer = { kind = "adamw", learning_rate = 3e-3 }
//! ```

use std::path::{Path, PathBuf};

use ibnorm_core::NormSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Mlp,
    TinyTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SyntheticClassification,
    CharLm,
}

fn default_widths() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_blocks() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_context() -> usize {
    64
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_init_std() -> f64 {
    0.02
}

/// Architecture and the normalization used at every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub topology: Topology,
    pub task: Task,
    pub norm: NormSpec,
    /// Hidden widths of the MLP.
    #[serde(default = "default_widths")]
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Context length in characters.
    #[serde(default = "default_context")]
    pub context: usize,
    /// Hidden width of the transformer feed-forward as a multiple of d_model.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Standard deviation of transformer weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelSpec {
    pub fn mlp(norm: NormSpec) -> Self {
        Self {
            topology: Topology::Mlp,
            task: Task::SyntheticClassification,
            norm,
            layer_widths: default_widths(),
            n_blocks: default_blocks(),
            d_model: default_d_model(),
            n_heads: default_heads(),
            context: default_context(),
            mlp_ratio: default_mlp_ratio(),
            init_std: default_init_std(),
        }
    }

    pub fn tiny_transformer(norm: NormSpec) -> Self {
        Self {
            topology: Topology::TinyTransformer,
            task: Task::CharLm,
            ..Self::mlp(norm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        match (self.topology, self.task) {
            (Topology::Mlp, Task::SyntheticClassification) | (Topology::TinyTransformer, Task::CharLm) => {}
            (t, k) => return Err(HarnessError::Config(format!("topology {t:?} does not support task {k:?}"))),
        }
        match self.topology {
            Topology::Mlp => {
                if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
                    return Err(HarnessError::Config("mlp needs at least one nonzero hidden width".into()));
                }
            }
            Topology::TinyTransformer => {
                if self.n_blocks == 0 || self.d_model == 0 || self.context == 0 || self.mlp_ratio == 0 {
                    return Err(HarnessError::Config("transformer dimensions must be positive".into()));
                }
                if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                    return Err(HarnessError::Config(format!(
                        "d_model {} is not divisible by n_heads {}",
                        self.d_model, self.n_heads
                    )));
                }
            }
        }
        if !(self.init_std > 0.0) {
            return Err(HarnessError::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Number of normalization sites.
    pub fn norm_sites(&self) -> usize {
        match self.topology {
            Topology::Mlp => self.layer_widths.len(),
            Topology::TinyTransformer => 2 * self.n_blocks + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[serde(alias = "adam_w")]
    Adamw,
}

fn default_lr() -> f64 {
    3e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_min_lr_ratio() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Decoupled for AdamW, added to the gradient for SGD; applies to weight
    /// matrices only.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Final learning rate of the cosine schedule as a fraction of the peak.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            learning_rate,
            weight_decay: 0.0,
            momentum: default_momentum(),
            betas: default_betas(),
            eps: default_adam_eps(),
            grad_clip: default_clip(),
            min_lr_ratio: default_min_lr_ratio(),
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..Self::adamw(learning_rate)
        }
    }
}

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    16
}
fn default_separation() -> f64 {
    5.0
}
fn default_one() -> f64 {
    1.0
}
fn default_n_train() -> usize {
    4096
}
fn default_n_eval() -> usize {
    1024
}
fn default_eval_fraction() -> f64 {
    0.1
}
fn default_eval_windows() -> usize {
    64
}

/// Data source parameters; fields irrelevant to the model's task are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Distance between any two class means, in units of `noise_std`.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_one")]
    pub noise_std: f64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// UTF-8 text file; the bundled corpus is used when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Trailing fraction of the text held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Number of fixed evaluation windows (char-LM).
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            dim: default_dim(),
            separation: default_separation(),
            noise_std: default_one(),
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            corpus: None,
            eval_fraction: default_eval_fraction(),
            eval_windows: default_eval_windows(),
        }
    }
}

fn default_batch() -> usize {
    32
}
fn default_steps() -> usize {
    200
}
fn default_eval_interval() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub data: DataSpec,
    /// Where metrics and the final checkpoint go; nothing is written when
    /// absent.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Train only the normalization scale/shift parameters.
    #[serde(default)]
    pub freeze_except_norm: bool,
}

impl TrainConfig {
    pub fn new(seed: u64, optimizer: OptimizerConfig) -> Self {
        Self {
            seed,
            optimizer,
            batch_size: default_batch(),
            steps: default_steps(),
            warmup_steps: 0,
            eval_interval: default_eval_interval(),
            data: DataSpec::default(),
            output_dir: None,
            freeze_except_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and nonnegative, got {}", o.learning_rate));
        }
        if !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if !o.betas.iter().all(|b| (0.0..1.0).contains(b)) || !(o.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = o.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&o.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]".into());
        }
        let d = &self.data;
        if d.classes < 2 || d.dim == 0 || d.n_train < 2 || d.n_eval < 2 {
            return bad("synthetic data needs >= 2 classes, dim >= 1 and >= 2 points per split".into());
        }
        if d.dim < d.classes {
            return bad(format!("dim {} must be at least the number of classes {}", d.dim, d.classes));
        }
        if !(d.noise_std > 0.0) || !(d.separation >= 0.0) {
            return bad("noise_std must be positive and separation nonnegative".into());
        }
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            return bad(format!("eval_fraction must lie in (0, 1), got {}", d.eval_fraction));
        }
        if d.eval_windows < 2 {
            return bad("eval_windows must be at least 2".into());
        }
        Ok(())
    }
}

/// A full experiment: model plus training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Parses TOML, reporting syntax and schema errors with line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_column(text, s.start))
                .unwrap_or((1, 1));
            HarnessError::ConfigParse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// 1-based line and column of a byte offset.
pub fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

//! Desk-scale training harness: an MLP on Gaussian mixtures and a tiny
//! character-level transformer, each with a configurable normalization layer
//! at every site, plus checkpointing and IB probing.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod model;
pub mod optim;
pub mod probe;
pub mod train;

pub use checkpoint::{evaluate, Checkpoint};
pub use config::{DataSpec, ExperimentConfig, ModelSpec, OptimizerConfig, OptimizerKind, Task, Topology, TrainConfig};
pub use data::{make_dataset, Batch, Dataset, Split};
pub use error::{HarnessError, Result};
pub use model::Model;
pub use probe::{probe_checkpoint, probe_ib, ProbeOptions};
pub use train::{train, MetricRow, Run, TrainOutcome};

pub(crate) use train::STREAM_DATASET;

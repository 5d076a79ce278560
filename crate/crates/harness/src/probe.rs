//! Token-level IB probing of a trained model.

use ibnorm_core::autodiff::{Graph, Tensor};
use ibnorm_core::info::{token_ib_value, IBTrace, MaskMatrix, TimestepReps};
use ibnorm_core::norm::Mode;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::model::{Model, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub beta: f64,
    pub sigma: f64,
    /// Number of held-out examples N.
    pub batch: usize,
    /// Sampled timesteps P (capped by the context length).
    pub timesteps: usize,
    /// Attach an explicit all-active mask to every timestep.
    pub all_active_mask: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma: 1.0,
            batch: 64,
            timesteps: 30,
            all_active_mask: false,
        }
    }
}

/// `p` positions spread evenly over `0..seq`, always including the last.
pub fn probe_positions(seq: usize, p: usize) -> Vec<usize> {
    let p = p.clamp(1, seq);
    if p == 1 {
        return vec![seq - 1];
    }
    let mut out: Vec<usize> = (0..p).map(|j| j * (seq - 1) / (p - 1)).collect();
    out.dedup();
    out
}

fn rows(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let r: Vec<Vec<f64>> = idx.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&r).expect("non-empty row selection")
}

/// Collects `T_0..T_L` and label embeddings on the held-out batch and
/// estimates the IB trace.
///
/// For classification, `Y` is the one-hot label and there is one timestep;
/// for char-LM, timesteps are positions within the window and `Y` is the
/// token-embedding row of the target character at that position.
pub fn probe_ib(model: &mut Model, data: &Dataset, opts: &ProbeOptions) -> Result<IBTrace> {
    if opts.batch < 2 {
        return Err(HarnessError::Config("probe batch must hold at least 2 examples".into()));
    }
    let batch = data.probe_batch(Split::Eval, opts.batch);
    let mut g = Graph::new();
    let (_, pass) = model.forward(&mut g, &batch, Mode::Eval, None)?;
    let mut layer_values = vec![g.value(pass.input_rep).clone()];
    layer_values.extend(pass.site_reps.iter().map(|&v| g.value(v).clone()));
    let mask = |n: usize| opts.all_active_mask.then(|| MaskMatrix::all_active(n));

    let steps = match (&batch, &model.net) {
        (Batch::Classification { y, .. }, Network::Mlp(_)) => {
            let classes = data.output_size();
            let onehot: Vec<Vec<f64>> = y
                .iter()
                .map(|&c| (0..classes).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
                .collect();
            vec![TimestepReps {
                layers: layer_values,
                labels: Tensor::from_rows(&onehot)?,
                mask: mask(y.len()),
            }]
        }
        (
            Batch::Tokens {
                targets, batch, seq, ..
            },
            Network::TinyTransformer(t),
        ) => probe_positions(*seq, opts.timesteps)
            .into_iter()
            .map(|p| {
                let idx: Vec<usize> = (0..*batch).map(|b| b * seq + p).collect();
                let target_ids: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
                TimestepReps {
                    layers: layer_values.iter().map(|l| rows(l, &idx)).collect(),
                    labels: t.embedding_rows(&model.params, &target_ids),
                    mask: mask(*batch),
                }
            })
            .collect(),
        _ => return Err(HarnessError::Config("batch kind does not match the model's task".into())),
    };
    Ok(token_ib_value(&steps, opts.beta, opts.sigma)?)
}

/// [`probe_ib`] on a restored checkpoint.
pub fn probe_checkpoint(checkpoint: &Checkpoint, opts: &ProbeOptions) -> Result<IBTrace> {
    let mut run = checkpoint.restore()?;
    probe_ib(&mut run.model, &run.data, opts)
}

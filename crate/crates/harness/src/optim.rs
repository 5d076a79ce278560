//! SGD with momentum, AdamW, and the warmup-then-cosine schedule.

use ibnorm_core::autodiff::Tensor;

use crate::config::{OptimizerConfig, OptimizerKind};
use crate::model::ParamStore;

/// Learning rate for a 0-based `step`: linear warmup to the peak over
/// `warmup` steps, then cosine decay to `min_lr_ratio * peak` at `total`.
pub fn learning_rate(cfg: &OptimizerConfig, step: usize, warmup: usize, total: usize) -> f64 {
    let peak = cfg.learning_rate;
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = peak * cfg.min_lr_ratio;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter optimizer state, aligned with the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    /// AdamW first moments, or SGD velocities.
    pub first: Vec<Vec<f64>>,
    /// AdamW second moments (empty vectors for SGD).
    pub second: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = |on: bool| -> Vec<Vec<f64>> {
            params
                .iter()
                .map(|p| if on { vec![0.0; p.value.numel()] } else { Vec::new() })
                .collect()
        };
        Self {
            cfg,
            first: zeros(true),
            second: zeros(cfg.kind == OptimizerKind::Adamw),
            t: 0,
        }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`, or
    /// `None` for frozen parameters, which are left untouched. Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor<f64>>], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let [b1, b2] = self.cfg.betas;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = params.get_mut(i);
            if !param.trainable {
                continue;
            }
            let decay = if param.role.decays() { self.cfg.weight_decay } else { 0.0 };
            let w = param.value.data_mut();
            let m = &mut self.first[i];
            match self.cfg.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(grad.data()) {
                        let g = g * clip + decay * *w;
                        *m = self.cfg.momentum * *m + g;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adamw => {
                    let v = &mut self.second[i];
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
                        let g = g * clip;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let update = (*m / bias1) / ((*v / bias2).sqrt() + self.cfg.eps);
                        *w -= lr * (update + decay * *w);
                    }
                }
            }
        }
        norm
    }
}

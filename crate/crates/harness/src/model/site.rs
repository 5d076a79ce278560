use ibnorm_core::autodiff::{Graph, Tensor, Var};
use ibnorm_core::norm::{AffineVars, Mode, NormLayer};
use ibnorm_core::{build_norm, NormSpec};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::params::{BoundParams, ParamRole, ParamStore};

/// One normalization site: the layer plus the ids of its scale and shift in
/// the model's parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSite {
    pub name: String,
    pub layer: NormLayer<f64>,
    pub gamma: Option<usize>,
    pub beta: Option<usize>,
}

impl NormSite {
    pub fn new(name: &str, spec: NormSpec, width: usize, store: &mut ParamStore) -> Result<Self> {
        let mut layer = build_norm::<f64>(spec, width)?;
        // Scale and shift live in the parameter store instead.
        layer.affine = None;
        let (gamma, beta) = if spec.affine {
            (
                Some(store.add(format!("{name}.gamma"), Tensor::ones(vec![width]), ParamRole::NormGamma)),
                Some(store.add(format!("{name}.beta"), Tensor::zeros(vec![width]), ParamRole::NormBeta)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            name: name.to_string(),
            layer,
            gamma,
            beta,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        x: Var,
        bound: &BoundParams,
        mode: Mode,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.layer.set_mode(mode);
        let affine = match (self.gamma, self.beta) {
            (Some(gm), Some(bt)) => Some(AffineVars {
                gamma: bound.var(gm),
                beta: bound.var(bt),
            }),
            _ => None,
        };
        // NormalNorm noise is a training-time regulariser only.
        let noise = if mode == Mode::Train { noise } else { None };
        Ok(self.layer.forward(g, x, affine.as_ref(), noise)?)
    }

    /// BatchNorm running statistics, if any, as `(name, tensor)` pairs.
    pub fn buffers(&self) -> Vec<(String, &Tensor<f64>)> {
        match &self.layer.stats {
            Some(s) => vec![
                (format!("{}.running_mean", self.name), &s.running_mean),
                (format!("{}.running_var", self.name), &s.running_var),
            ],
            None => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let name = self.name.clone();
        match &mut self.layer.stats {
            Some(s) => vec![
                (format!("{name}.running_mean"), &mut s.running_mean),
                (format!("{name}.running_var"), &mut s.running_var),
            ],
            None => Vec::new(),
        }
    }
}

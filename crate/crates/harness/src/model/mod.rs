//! Desk-scale models with a normalization layer at every site.

mod mlp;
mod params;
mod site;
mod transformer;

pub use mlp::Mlp;
pub use params::{BoundParams, Param, ParamRole, ParamStore};
pub use site::NormSite;
pub use transformer::TinyTransformer;

use ibnorm_core::autodiff::{Graph, Tensor, Var};
use ibnorm_core::norm::Mode;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelSpec, Topology};
use crate::data::{Batch, Dataset};
use crate::error::{HarnessError, Result};

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Input representation `T_0`: the raw features, or token plus position
    /// embeddings.
    pub input_rep: Var,
    /// Output of every normalization site, in site order.
    pub site_reps: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Mlp(Mlp),
    TinyTransformer(TinyTransformer),
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    /// Initializes a model for `data`'s input and output sizes.
    pub fn new(spec: &ModelSpec, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if spec.task != data.task() {
            return Err(HarnessError::Config(format!(
                "model task {:?} does not match dataset task {:?}",
                spec.task,
                data.task()
            )));
        }
        let mut params = ParamStore::new();
        let net = match spec.topology {
            Topology::Mlp => Network::Mlp(Mlp::new(spec, data.input_size(), data.output_size(), &mut params, rng)?),
            Topology::TinyTransformer => {
                Network::TinyTransformer(TinyTransformer::new(spec, data.input_size(), &mut params, rng)?)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            params,
            net,
        })
    }

    pub fn sites(&self) -> &[NormSite] {
        match &self.net {
            Network::Mlp(m) => &m.sites,
            Network::TinyTransformer(t) => &t.sites,
        }
    }

    pub fn sites_mut(&mut self) -> &mut [NormSite] {
        match &mut self.net {
            Network::Mlp(m) => &mut m.sites,
            Network::TinyTransformer(t) => &mut t.sites,
        }
    }

    /// Binds the parameters into `g` and runs the network on `batch`.
    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        batch: &Batch,
        mode: Mode,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<(BoundParams, ForwardPass)> {
        let bound = self.params.bind(g);
        let pass = match (&mut self.net, batch) {
            (Network::Mlp(m), Batch::Classification { x, .. }) => m.forward(g, &bound, x, mode, noise)?,
            (
                Network::TinyTransformer(t),
                Batch::Tokens {
                    inputs, batch, seq, ..
                },
            ) => t.forward(g, &bound, inputs, *batch, *seq, mode, noise)?,
            _ => return Err(HarnessError::Config("batch kind does not match the model's task".into())),
        };
        Ok((bound, pass))
    }

    /// Mean cross-entropy of a forward pass.
    pub fn loss(&mut self, g: &mut Graph<f64>, batch: &Batch, mode: Mode, noise: Option<&mut ChaCha8Rng>) -> Result<(BoundParams, ForwardPass, Var)> {
        let (bound, pass) = self.forward(g, batch, mode, noise)?;
        let loss = g.softmax_cross_entropy(pass.logits, batch.targets())?;
        Ok((bound, pass, loss))
    }

    pub fn freeze_except_norm(&mut self) {
        self.params.freeze_except_norm();
    }

    pub fn unfreeze_all(&mut self) {
        self.params.unfreeze_all();
    }

    /// Non-trainable state (BatchNorm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<f64>)> {
        self.sites().iter().flat_map(|s| s.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.sites_mut().iter_mut().flat_map(|s| s.buffers_mut()).collect()
    }
}

use ibnorm_core::autodiff::{Graph, Tensor, Var};
use ibnorm_core::norm::Mode;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelSpec;
use crate::error::Result;
use crate::model::params::{BoundParams, ParamRole, ParamStore};
use crate::model::site::NormSite;
use crate::model::ForwardPass;

/// `x -> [linear -> norm -> relu] * k -> linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(usize, usize)>,
    pub sites: Vec<NormSite>,
    head: (usize, usize),
}

pub(crate) fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect()).expect("shape matches data")
}

impl Mlp {
    pub fn new(spec: &ModelSpec, input: usize, output: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut sites = Vec::new();
        let mut fan_in = input;
        for (i, &w) in spec.layer_widths.iter().enumerate() {
            let weight = store.add(
                format!("layers.{i}.weight"),
                normal_tensor(vec![fan_in, w], (2.0 / fan_in as f64).sqrt(), rng),
                ParamRole::Weight,
            );
            let bias = store.add(format!("layers.{i}.bias"), Tensor::zeros(vec![w]), ParamRole::Bias);
            layers.push((weight, bias));
            sites.push(NormSite::new(&format!("layers.{i}.norm"), spec.norm, w, store)?);
            fan_in = w;
        }
        let head_w = store.add(
            "head.weight",
            normal_tensor(vec![fan_in, output], (1.0 / fan_in as f64).sqrt(), rng),
            ParamRole::Weight,
        );
        let head_b = store.add("head.bias", Tensor::zeros(vec![output]), ParamRole::Bias);
        Ok(Self {
            layers,
            sites,
            head: (head_w, head_b),
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        bound: &BoundParams,
        x: &Tensor<f64>,
        mode: Mode,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let input = g.constant(x.clone());
        let mut h = input;
        let mut reps = Vec::with_capacity(self.sites.len());
        for ((w, b), site) in self.layers.iter().zip(self.sites.iter_mut()) {
            let z = linear(g, h, bound.var(*w), bound.var(*b))?;
            let n = site.forward(g, z, bound, mode, noise.as_deref_mut())?;
            reps.push(n);
            h = g.relu(n);
        }
        let logits = linear(g, h, bound.var(self.head.0), bound.var(self.head.1))?;
        Ok(ForwardPass {
            logits,
            input_rep: input,
            site_reps: reps,
        })
    }
}

/// `x W + b` with the bias broadcast over rows.
pub(crate) fn linear(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let shape = g.shape(y).to_vec();
    let b = g.broadcast(b, shape)?;
    Ok(g.add(y, b)?)
}

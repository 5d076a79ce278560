use ibnorm_core::autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// What a parameter is used for; decides weight decay and freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Embedding,
    NormGamma,
    NormBeta,
}

impl ParamRole {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamRole::NormGamma | ParamRole::NormBeta)
    }

    /// Only weight matrices are decayed.
    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f64>,
    pub role: ParamRole,
    pub trainable: bool,
}

/// Ordered, named parameters of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for every parameter, in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f64>, role: ParamRole) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a graph leaf; frozen ones get no gradient.
    pub fn bind(&self, g: &mut Graph<f64>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.set_requires_grad(p.trainable);
                g.leaf(t)
            })
            .collect();
        BoundParams { vars }
    }

    /// Marks everything except normalization scale/shift as frozen.
    pub fn freeze_except_norm(&mut self) {
        for p in &mut self.params {
            p.trainable = p.role.is_norm();
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = true;
        }
    }
}

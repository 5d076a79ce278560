use ibnorm_core::autodiff::{Graph, Tensor};
use ibnorm_core::norm::Mode;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelSpec;
use crate::error::{HarnessError, Result};
use crate::model::mlp::{linear, normal_tensor};
use crate::model::params::{BoundParams, ParamRole, ParamStore};
use crate::model::site::NormSite;
use crate::model::ForwardPass;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Pre-norm decoder-only transformer over characters.
///
/// Sites are ordered `blocks.0.norm1, blocks.0.norm2, ..., norm_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    pub d_model: usize,
    pub n_heads: usize,
    pub context: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    pub sites: Vec<NormSite>,
    head: (usize, usize),
}

impl TinyTransformer {
    pub fn new(spec: &ModelSpec, vocab: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = spec.d_model;
        let std = spec.init_std;
        // Residual projections are scaled down with depth, GPT-2 style.
        let resid_std = std / ((2 * spec.n_blocks) as f64).sqrt();
        let tok_emb = store.add("tok_emb", normal_tensor(vec![vocab, d], std, rng), ParamRole::Embedding);
        let pos_emb = store.add("pos_emb", normal_tensor(vec![spec.context, d], std, rng), ParamRole::Embedding);
        let hidden = spec.mlp_ratio * d;
        let mut blocks = Vec::new();
        let mut sites = Vec::new();
        for i in 0..spec.n_blocks {
            let p = format!("blocks.{i}");
            sites.push(NormSite::new(&format!("{p}.norm1"), spec.norm, d, store)?);
            let wq = store.add(format!("{p}.attn.wq"), normal_tensor(vec![d, d], std, rng), ParamRole::Weight);
            let wk = store.add(format!("{p}.attn.wk"), normal_tensor(vec![d, d], std, rng), ParamRole::Weight);
            let wv = store.add(format!("{p}.attn.wv"), normal_tensor(vec![d, d], std, rng), ParamRole::Weight);
            let wo = store.add(format!("{p}.attn.wo"), normal_tensor(vec![d, d], resid_std, rng), ParamRole::Weight);
            sites.push(NormSite::new(&format!("{p}.norm2"), spec.norm, d, store)?);
            let w1 = store.add(format!("{p}.mlp.w1"), normal_tensor(vec![d, hidden], std, rng), ParamRole::Weight);
            let b1 = store.add(format!("{p}.mlp.b1"), Tensor::zeros(vec![hidden]), ParamRole::Bias);
            let w2 = store.add(
                format!("{p}.mlp.w2"),
                normal_tensor(vec![hidden, d], resid_std, rng),
                ParamRole::Weight,
            );
            let b2 = store.add(format!("{p}.mlp.b2"), Tensor::zeros(vec![d]), ParamRole::Bias);
            blocks.push(Block {
                wq,
                wk,
                wv,
                wo,
                w1,
                b1,
                w2,
                b2,
            });
        }
        sites.push(NormSite::new("norm_f", spec.norm, d, store)?);
        let hw = store.add("head.weight", normal_tensor(vec![d, vocab], std, rng), ParamRole::Weight);
        let hb = store.add("head.bias", Tensor::zeros(vec![vocab]), ParamRole::Bias);
        Ok(Self {
            d_model: d,
            n_heads: spec.n_heads,
            context: spec.context,
            tok_emb,
            pos_emb,
            blocks,
            sites,
            head: (hw, hb),
        })
    }

    pub fn tok_emb_id(&self) -> usize {
        self.tok_emb
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        bound: &BoundParams,
        inputs: &[usize],
        batch: usize,
        seq: usize,
        mode: Mode,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if seq > self.context || inputs.len() != batch * seq {
            return Err(HarnessError::Config(format!(
                "token batch of {} ids as {batch} x {seq} does not fit context {}",
                inputs.len(),
                self.context
            )));
        }
        let tok = g.gather(bound.var(self.tok_emb), inputs)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.gather(bound.var(self.pos_emb), &positions)?;
        let mut h = g.add(tok, pos)?;
        let input_rep = h;
        let mut reps = Vec::with_capacity(self.sites.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let a = self.sites[2 * i].forward(g, h, bound, mode, noise.as_deref_mut())?;
            reps.push(a);
            let q = g.matmul(a, bound.var(blk.wq))?;
            let k = g.matmul(a, bound.var(blk.wk))?;
            let v = g.matmul(a, bound.var(blk.wv))?;
            let att = g.causal_attention(q, k, v, self.n_heads, batch, seq)?;
            let proj = g.matmul(att, bound.var(blk.wo))?;
            h = g.add(h, proj)?;

            let m = self.sites[2 * i + 1].forward(g, h, bound, mode, noise.as_deref_mut())?;
            reps.push(m);
            let u = linear(g, m, bound.var(blk.w1), bound.var(blk.b1))?;
            let u = g.relu(u);
            let u = linear(g, u, bound.var(blk.w2), bound.var(blk.b2))?;
            h = g.add(h, u)?;
        }
        let last = self.sites.len() - 1;
        let f = self.sites[last].forward(g, h, bound, mode, noise)?;
        reps.push(f);
        let logits = linear(g, f, bound.var(self.head.0), bound.var(self.head.1))?;
        Ok(ForwardPass {
            logits,
            input_rep,
            site_reps: reps,
        })
    }

    /// Rows of the token embedding table.
    pub fn embedding_rows(&self, store: &ParamStore, ids: &[usize]) -> Tensor<f64> {
        let table = &store.get(self.tok_emb).value;
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| table.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).expect("non-empty ids")
    }
}


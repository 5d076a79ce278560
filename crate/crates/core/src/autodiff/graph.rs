//! Recording graph and reverse-mode backward pass.
//!
//! Every primitive call evaluates eagerly, appends one node, and returns a
//! [`Var`] handle. Nodes are appended in evaluation order, so the node list
//! is already topologically sorted and backward is a single reverse sweep.

use crate::autodiff::tensor::{axis_extents, Tensor};
use crate::compression::{self, CompressionKind};
use crate::error::{shape_err, Error, Result};
use crate::norm::power;
use crate::scalar::{gemm, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of primitive recorded at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    MeanAxis,
    VarAxis,
    SumAxis,
    Sqrt,
    Abs,
    Sign,
    Tanh,
    Ln1p,
    Exp,
    Relu,
    Scale,
    AddScalar,
    Broadcast,
    Reshape,
    SoftmaxAxis,
    Gather,
    SignedCompress,
    PowerTransform,
    SoftmaxCrossEntropy,
    CausalAttention,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    MeanAxis { x: Var, axis: usize },
    VarAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Sqrt(Var),
    Abs(Var),
    Sign,
    Tanh(Var),
    Ln1p(Var),
    Exp(Var),
    Relu(Var),
    Scale(Var, T),
    AddScalar(Var),
    Broadcast(Var),
    Reshape(Var),
    SoftmaxAxis { x: Var, axis: usize },
    Gather { table: Var, indices: Vec<usize> },
    SignedCompress { x: Var, kind: CompressionKind, lambda: T },
    PowerTransform { x: Var, lambda: T },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    CausalAttention(Box<Attention<T>>),
}

#[derive(Debug, Clone)]
struct Attention<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    seq: usize,
    probs: Vec<T>,
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    leaves: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Differentiable leaves that received a gradient, in creation order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        match &self.nodes[v.0].op {
            Op::Leaf => Primitive::Leaf,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::MatMul(..) => Primitive::MatMul,
            Op::MeanAxis { .. } => Primitive::MeanAxis,
            Op::VarAxis { .. } => Primitive::VarAxis,
            Op::SumAxis { .. } => Primitive::SumAxis,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Abs(_) => Primitive::Abs,
            Op::Sign => Primitive::Sign,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Ln1p(_) => Primitive::Ln1p,
            Op::Exp(_) => Primitive::Exp,
            Op::Relu(_) => Primitive::Relu,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(_) => Primitive::AddScalar,
            Op::Broadcast(_) => Primitive::Broadcast,
            Op::Reshape(_) => Primitive::Reshape,
            Op::SoftmaxAxis { .. } => Primitive::SoftmaxAxis,
            Op::Gather { .. } => Primitive::Gather,
            Op::SignedCompress { .. } => Primitive::SignedCompress,
            Op::PowerTransform { .. } => Primitive::PowerTransform,
            Op::SoftmaxCrossEntropy { .. } => Primitive::SoftmaxCrossEntropy,
            Op::CausalAttention(_) => Primitive::CausalAttention,
        }
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise division; a zero denominator is a contract error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(i) = self.value(b).data().iter().position(|d| d.is_zero()) {
            return Err(Error::Contract(format!("div: zero denominator at index {i}")));
        }
        let out = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// Rank-2 matrix product `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn reduce_shape(&self, op: &'static str, x: Var, axis: usize, keepdim: bool) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(shape_err(op, "empty reduction axis"));
        }
        let mut out = shape.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        Ok(out)
    }

    fn reduce(&self, x: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = T>) -> T) -> Vec<T> {
        let t = self.value(x);
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let data = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut it = (0..len).map(|j| data[base + j * inner]);
                out.push(f(&mut it));
            }
        }
        out
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.reduce_shape("sum_axis", x, axis, keepdim)?;
        let out = self.reduce(x, axis, |it| it.sum());
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.reduce_shape("mean_axis", x, axis, keepdim)?;
        let n = T::of_usize(self.shape(x)[axis]);
        let out = self.reduce(x, axis, |it| it.sum::<T>() / n);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Population (biased) variance along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.reduce_shape("var_axis", x, axis, keepdim)?;
        let n = T::of_usize(self.shape(x)[axis]);
        let out = self.reduce(x, axis, |it| {
            let vals: Vec<T> = it.collect();
            let mean = vals.iter().copied().sum::<T>() / n;
            vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n
        });
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::VarAxis { x, axis }, &[x]))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let flat = self.reshape(x, vec![self.value(x).numel()])?;
        self.sum_axis(flat, 0, false)
    }

    /// Mean of all entries as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let flat = self.reshape(x, vec![self.value(x).numel()])?;
        self.mean_axis(flat, 0, false)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|v| *v < T::zero()) {
            return Err(Error::Contract(format!("sqrt: negative input at index {i}")));
        }
        Ok(self.unary(x, Op::Sqrt(x), T::sqrt))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), T::abs)
    }

    /// Sign with `sign(0) = 0`.
    pub fn sign(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sign, sign_of)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), T::tanh)
    }

    pub fn ln1p(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|v| *v <= -T::one()) {
            return Err(Error::Contract(format!("ln1p: input <= -1 at index {i}")));
        }
        Ok(self.unary(x, Op::Ln1p(x), T::ln_1p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), T::exp)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + offset)
    }

    /// Explicit broadcast to `target`. Shapes align on the right; each source
    /// dimension must equal the target's or be 1.
    pub fn broadcast(&mut self, x: Var, target: Vec<usize>) -> Result<Var> {
        let map = broadcast_map(self.shape(x), &target)?;
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(target, data)?;
        Ok(self.push(out, Op::Broadcast(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let mut out = self.value(x).reshaped(shape)?;
        out.set_requires_grad(false);
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(shape_err("softmax_axis", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| src[base + j * inner])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::SoftmaxAxis { x, axis }, &[x]))
    }

    /// Row lookup: `table[indices[i], :]` for a rank-2 table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("gather", "table must be rank 2"));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather", format!("index {bad} >= {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// `sign(u) * f(|u|)` for the compression function of `kind`.
    ///
    /// The backward rule is `f'(|u|)`, which is continuous through `u = 0`.
    pub fn signed_compress(&mut self, x: Var, kind: CompressionKind, lambda: T) -> Result<Var> {
        if !(lambda > T::zero()) {
            return Err(Error::Contract("compression strength must be positive".into()));
        }
        let out = self
            .value(x)
            .map(|u| sign_of(u) * compression::f_lambda_unchecked(kind, u.abs(), lambda));
        Ok(self.push(out, Op::SignedCompress { x, kind, lambda }, &[x]))
    }

    /// Branchwise gaussianizing power transform with fixed exponent.
    pub fn power_transform(&mut self, x: Var, lambda: T) -> Result<Var> {
        let out = power::power_transform(self.value(x), lambda)?;
        Ok(self.push(out, Op::PowerTransform { x, lambda }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// rank-2 `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        let classes = t.shape()[1];
        if let Some(bad) = targets.iter().find(|&&c| c >= classes) {
            return Err(shape_err("softmax_cross_entropy", format!("target {bad} >= {classes}")));
        }
        let mut probs = vec![T::zero(); t.numel()];
        let mut loss = T::zero();
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (p, &z) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (z - max).exp();
                total += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= total;
            }
            loss += total.ln() + max - row[target];
        }
        let loss = loss / T::of_usize(targets.len());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d_model]` with rows grouped by
    /// sequence; heads split `d_model` into contiguous blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err("causal_attention", "q, k, v shapes differ"));
        }
        if shape.len() != 2 || shape[0] != batch * seq || heads == 0 || !shape[1].is_multiple_of(heads) {
            return Err(shape_err(
                "causal_attention",
                format!("shape {shape:?} vs batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let d = shape[1];
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(seq, dh, seq, scale, &qd[off..], (d, 1), &kd[off..], (1, d), T::zero(), p, (seq, 1));
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if j <= i {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = T::zero();
                        }
                    }
                    for s in &mut row[..=i] {
                        *s /= total;
                    }
                }
                gemm(seq, seq, dh, T::one(), p, (seq, 1), &vd[off..], (d, 1), T::zero(), &mut out[off..], (d, 1));
            }
        }
        let out = Tensor::new(shape, out)?;
        let att = Attention {
            q,
            k,
            v,
            heads,
            batch,
            seq,
            probs,
        };
        Ok(self.push(out, Op::CausalAttention(Box::new(att)), &[q, k, v]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let mut leaves = Vec::new();
        let mut out = Vec::with_capacity(grads.len());
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let keep = node.requires_grad && matches!(node.op, Op::Leaf);
            if keep {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaves.push(Var(idx));
                out.push(Some(Tensor::new(node.value.shape().to_vec(), g)?));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out, leaves })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                self.accumulate(grads, *b, |dst| add_into(dst, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                self.accumulate(grads, *b, |dst| {
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |dst| {
                    for ((d, &gi), &bi) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for ((d, &gi), &ai) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |dst| {
                    for ((d, &gi), &bi) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi / bi;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for (((d, &gi), &bi), &yi) in dst.iter_mut().zip(g).zip(bv).zip(out) {
                        *d -= gi * yi / bi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |dst| {
                    gemm(m, n, k, T::one(), g, (n, 1), bv, (1, n), T::one(), dst, (k, 1));
                });
                self.accumulate(grads, *b, |dst| {
                    gemm(k, m, n, T::one(), av, (1, k), g, (n, 1), T::one(), dst, (n, 1));
                });
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let w = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::of_usize(len)
                } else {
                    T::one()
                };
                self.accumulate(grads, *x, |dst| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gi = g[o * inner + i] * w;
                            for j in 0..len {
                                dst[o * len * inner + j * inner + i] += gi;
                            }
                        }
                    }
                });
            }
            Op::VarAxis { x, axis } => {
                let xv = self.value(*x).data();
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let n = T::of_usize(len);
                let two = T::of(2.0);
                self.accumulate(grads, *x, |dst| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mean = (0..len).map(|j| xv[base + j * inner]).sum::<T>() / n;
                            let gi = g[o * inner + i] * two / n;
                            for j in 0..len {
                                dst[base + j * inner] += gi * (xv[base + j * inner] - mean);
                            }
                        }
                    }
                });
            }
            Op::Sqrt(x) => self.elementwise(grads, *x, g, |_, y| T::of(0.5) / y, out),
            Op::Abs(x) => self.elementwise(grads, *x, g, |xi, _| sign_of(xi), out),
            // zero derivative almost everywhere
            Op::Sign => {}
            Op::Tanh(x) => self.elementwise(grads, *x, g, |_, y| T::one() - y * y, out),
            Op::Ln1p(x) => self.elementwise(grads, *x, g, |xi, _| T::one() / (T::one() + xi), out),
            Op::Exp(x) => self.elementwise(grads, *x, g, |_, y| y, out),
            Op::Relu(x) => self.elementwise(
                grads,
                *x,
                g,
                |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
                out,
            ),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |dst| {
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * c)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |dst| add_into(dst, g)),
            Op::Broadcast(x) => {
                let map = broadcast_map(self.shape(*x), node.value.shape()).expect("validated");
                self.accumulate(grads, *x, |dst| {
                    for (&src, &gi) in map.iter().zip(g) {
                        dst[src] += gi;
                    }
                });
            }
            Op::SoftmaxAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                self.accumulate(grads, *x, |dst| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len)
                                .map(|j| g[base + j * inner] * out[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                dst[at] += out[at] * (g[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let cols = self.value(*table).last_dim();
                self.accumulate(grads, *table, |dst| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dst[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::SignedCompress { x, kind, lambda } => {
                let (kind, lambda) = (*kind, *lambda);
                self.elementwise(
                    grads,
                    *x,
                    g,
                    |xi, _| compression::f_lambda_derivative_unchecked(kind, xi.abs(), lambda),
                    out,
                );
            }
            Op::PowerTransform { x, lambda } => {
                let lambda = *lambda;
                self.elementwise(grads, *x, g, |xi, _| power::power_transform_derivative(xi, lambda), out);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = self.value(*logits).last_dim();
                let w = g[0] / T::of_usize(targets.len());
                self.accumulate(grads, *logits, |dst| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dst[r * classes..(r + 1) * classes];
                        for (d, &p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += w * p;
                        }
                        row[t] -= w;
                    }
                });
            }
            Op::CausalAttention(att) => self.attention_backward(att, g, grads),
        }
    }

    fn attention_backward(&self, att: &Attention<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let Attention {
            q,
            k,
            v,
            heads,
            batch,
            seq,
            probs,
        } = att;
        let (heads, batch, seq) = (*heads, *batch, *seq);
        let d = self.shape(*q)[1];
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
        let need_q = self.nodes[q.0].requires_grad;
        let need_k = self.nodes[k.0].requires_grad;
        let need_v = self.nodes[v.0].requires_grad;
        let mut dq = need_q.then(|| vec![T::zero(); qd.len()]);
        let mut dk = need_k.then(|| vec![T::zero(); kd.len()]);
        let mut dv = need_v.then(|| vec![T::zero(); vd.len()]);
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                if let Some(dv) = dv.as_mut() {
                    gemm(seq, seq, dh, T::one(), p, (1, seq), &g[off..], (d, 1), T::one(), &mut dv[off..], (d, 1));
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                gemm(seq, dh, seq, T::one(), &g[off..], (d, 1), &vd[off..], (1, d), T::zero(), &mut dp, (seq, 1));
                for i in 0..seq {
                    let row_p = &p[i * seq..(i + 1) * seq];
                    let row_dp = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = row_p.iter().zip(row_dp.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pij) in row_dp.iter_mut().zip(row_p) {
                        *x = pij * (*x - dot);
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(seq, seq, dh, scale, &dp, (seq, 1), &kd[off..], (d, 1), T::one(), &mut dq[off..], (d, 1));
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(seq, seq, dh, scale, &dp, (1, seq), &qd[off..], (d, 1), T::one(), &mut dk[off..], (d, 1));
                }
            }
        }
        for (var, contribution) in [(*q, dq), (*k, dk), (*v, dv)] {
            if let Some(c) = contribution {
                self.accumulate(grads, var, |dst| add_into(dst, &c));
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<T>>],
        x: Var,
        g: &[T],
        local: impl Fn(T, T) -> T,
        out: &[T],
    ) {
        let xv = self.value(x).data();
        self.accumulate(grads, x, |dst| {
            for (((d, &gi), &xi), &yi) in dst.iter_mut().zip(g).zip(xv).zip(out) {
                *d += gi * local(xi, yi);
            }
        });
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[var.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(buf);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sign_of<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// For each flat index of `target`, the flat index of `source` it reads.
fn broadcast_map(source: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if source.len() > target.len() {
        return Err(shape_err("broadcast", format!("{source:?} has higher rank than {target:?}")));
    }
    let pad = target.len() - source.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(source.iter().copied()).collect();
    for (s, t) in padded.iter().zip(target) {
        if *s != *t && *s != 1 {
            return Err(shape_err("broadcast", format!("{source:?} -> {target:?}")));
        }
    }
    // Source strides, zeroed on broadcast dimensions.
    let mut strides = vec![0usize; padded.len()];
    let mut acc = 1;
    for i in (0..padded.len()).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(map)
}

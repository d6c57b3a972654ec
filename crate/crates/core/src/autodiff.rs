//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward op appends a node holding its value and the ids of its
//! inputs. Because inputs always precede outputs, replaying the tape in
//! reverse order visits each node after all of its consumers.

use crate::error::{dim_err, Error, Result};
use crate::scalar::{gemm, lit, Scalar};
use crate::tensor::{gelu, gelu_grad, layer_norm_rows, matmul_dims, softmax_rows, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a recorded linear map: upstream gradient in, input gradient out.
pub type Adjoint<S> = Box<dyn Fn(&[S]) -> Vec<S>>;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Relu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    Mask(Var, Vec<S>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<S>,
    },
    Linear {
        x: Var,
        adjoint: Adjoint<S>,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

impl<S> Node<S> {
    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Vec<S>>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf, tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad())
    }

    /// Records a tracked leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: &Tensor<S>) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), true)
    }

    /// Records an untracked leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push_leaf(shape, data, false))
    }

    /// Records an untracked copy of a tensor.
    pub fn constant_from(&mut self, tensor: &Tensor<S>) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(op, format!("expected a 2-D operand, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); m * n];
        gemm(false, false, m, k, n, self.value(a), self.value(b), S::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return dim_err("matmul_nt", format!("inner dimensions differ: {k} vs {k2}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(false, true, m, k, n, self.value(a), self.value(b), S::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`C` vector to every row of `x[.. x C]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.nodes[x.0].cols();
        if self.shape(bias) != [c] {
            return dim_err("add_row", format!("bias {:?} for {c} columns", self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).to_vec();
        softmax_rows(&mut out, self.nodes[x.0].cols());
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let c = self.nodes[x.0].cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return dim_err("layer_norm", format!("affine parameters must have {c} entries"));
        }
        let mut out = vec![S::zero(); self.value(x).len()];
        let (mean, rstd) = layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps, &mut out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gain, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return dim_err("slice_cols", format!("{start}..{} of {c}", start + len));
        }
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return dim_err("concat_cols", format!("row counts {r} vs {pr}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over rows: `[N x C] -> [1 x C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        let inv = S::one() / S::from_usize(r).unwrap();
        let mut out = vec![S::zero(); c];
        for row in self.value(x).chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return dim_err("mask", "mask length differs from input");
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Mask(x, mask), &[x]))
    }

    /// Cross-entropy of a single logit row against `label`, in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if label >= n {
            return Err(Error::Range(format!("label {label} with {n} classes")));
        }
        let z = self.value(logits);
        let max = z.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
        let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
        let loss = lse - z[label];
        let probs = z.iter().map(|&x| (x - lse).exp()).collect();
        let op = Op::CrossEntropy {
            logits,
            label,
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Records `y = L(x)` for a linear map whose forward value was computed
    /// by the caller; `adjoint` must apply `L^T`.
    pub fn linear(&mut self, x: Var, shape: Vec<usize>, value: Vec<S>, adjoint: Adjoint<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return dim_err("linear", "value length differs from shape");
        }
        Ok(self.push(shape, value, Op::Linear { x, adjoint }, &[x]))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::State("backward already ran on this tape; record a new forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if tracked(*a) {
                    gemm(false, true, m, n, k, g, &nodes[b.0].value, S::one(), acc!(*a));
                }
                if tracked(*b) {
                    gemm(true, false, k, m, n, &nodes[a.0].value, g, S::one(), acc!(*b));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if tracked(*a) {
                    gemm(false, false, m, n, k, g, &nodes[b.0].value, S::one(), acc!(*a));
                }
                if tracked(*b) {
                    gemm(true, false, n, m, k, g, &nodes[a.0].value, S::one(), acc!(*b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        for (d, &x) in acc!(v).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let bv = &nodes[b.0].value;
                    for ((d, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if tracked(*b) {
                    let av = &nodes[a.0].value;
                    for ((d, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if tracked(*x) {
                    for (d, &v) in acc!(*x).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if tracked(*bias) {
                    let c = nodes[bias.0].value.len();
                    let db = acc!(*bias);
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if tracked(*x) {
                    for (d, &v) in acc!(*x).iter_mut().zip(g) {
                        *d += v * *s;
                    }
                }
            }
            Op::Softmax(x) => {
                if tracked(*x) {
                    let c = node.cols();
                    let dx = acc!(*x);
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let c = node.cols();
                let cs = S::from_usize(c).unwrap();
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                if tracked(*gain) || tracked(*bias) {
                    let mut dg = vec![S::zero(); c];
                    let mut db = vec![S::zero(); c];
                    for (r, (xr, gr)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                        for j in 0..c {
                            let xhat = (xr[j] - mean[r]) * rstd[r];
                            dg[j] += gr[j] * xhat;
                            db[j] += gr[j];
                        }
                    }
                    if tracked(*gain) {
                        for (d, v) in acc!(*gain).iter_mut().zip(dg) {
                            *d += v;
                        }
                    }
                    if tracked(*bias) {
                        for (d, v) in acc!(*bias).iter_mut().zip(db) {
                            *d += v;
                        }
                    }
                }
                if tracked(*x) {
                    let dx = acc!(*x);
                    let mut dxhat = vec![S::zero(); c];
                    let mut xhat = vec![S::zero(); c];
                    for (r, ((xr, gr), dr)) in xv.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..c {
                            xhat[j] = (xr[j] - mean[r]) * rstd[r];
                            dxhat[j] = gr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xhat[j];
                        }
                        for j in 0..c {
                            dr[j] += rstd[r] / cs * (cs * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if tracked(*x) {
                    let xv = &nodes[x.0].value;
                    for ((d, &v), &xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        *d += v * gelu_grad(xi);
                    }
                }
            }
            Op::Relu(x) => {
                if tracked(*x) {
                    let xv = &nodes[x.0].value;
                    for ((d, &v), &xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *d += v;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if tracked(*x) {
                    let c = nodes[x.0].cols();
                    let w = node.cols();
                    for (dr, gr) in acc!(*x).chunks_mut(c).zip(g.chunks(w)) {
                        for (d, &v) in dr[*start..*start + w].iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].cols();
                    if tracked(p) {
                        for (dr, gr) in acc!(p).chunks_mut(w).zip(g.chunks(total)) {
                            for (d, &v) in dr.iter_mut().zip(&gr[offset..offset + w]) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                if tracked(*x) {
                    let rows = nodes[x.0].shape[0];
                    let inv = S::one() / S::from_usize(rows).unwrap();
                    let c = node.cols();
                    for dr in acc!(*x).chunks_mut(c) {
                        for (d, &v) in dr.iter_mut().zip(g) {
                            *d += v * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if tracked(*x) {
                    for d in acc!(*x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Reshape(x) => {
                if tracked(*x) {
                    for (d, &v) in acc!(*x).iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Mask(x, mask) => {
                if tracked(*x) {
                    for ((d, &v), &m) in acc!(*x).iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if tracked(*logits) {
                    let dz = acc!(*logits);
                    for (j, (d, &p)) in dz.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { S::one() } else { S::zero() };
                        *d += g[0] * (p - target);
                    }
                }
            }
            Op::Linear { x, adjoint } => {
                if tracked(*x) {
                    let back = adjoint(g);
                    for (d, v) in acc!(*x).iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
        }
    }

    /// Gradient of the loss with respect to `v`; zeros for tracked values
    /// that do not reach the loss.
    pub fn grad(&self, v: Var) -> Result<Vec<S>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::State("backward has not run on this tape".into()))?;
        let len = self.nodes[v.0].value.len();
        Ok(grads[v.0].clone().unwrap_or_else(|| vec![S::zero(); len]))
    }

    /// Stores the gradient of `v` into `tensor.grad`.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor<S>) -> Result<()> {
        tensor.set_grad(self.grad(v)?)
    }
}

fn grad_slot<'a, S: Scalar>(nodes: &[Node<S>], grads: &'a mut [Option<Vec<S>>], v: Var) -> &'a mut Vec<S> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

/// Helper used by tests and the model to build `1/sqrt(d)` in the scalar type.
pub(crate) fn inv_sqrt<S: Scalar>(d: usize) -> S {
    S::one() / lit::<S>(d as f64).sqrt()
}

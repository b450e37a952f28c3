//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order. Handles
//! ([`Var`]) are plain indices into that record, so the tape is
//! topologically ordered by construction. [`Graph::backward`] walks the
//! record in reverse and accumulates adjoints in that fixed order,
//! which keeps gradients bitwise reproducible.
//!
//! Nodes only receive gradients when some leaf upstream of them was
//! created with `requires_grad`. [`Graph::stop_gradient`] produces a
//! node that never requires grad, so nothing downstream of it reaches
//! its input during the reverse pass.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reduce {
        x: Var,
        map: Vec<usize>,
        scale: f64,
    },
    StopGradient,
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus the values of every node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    detached: Vec<Tensor>,
    frozen: Option<Vec<Tensor>>,
    frozen_cursor: usize,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` nodes replay `values` in order
    /// instead of copying their inputs.
    ///
    /// Used by the finite-difference checker so perturbations only move
    /// the differentiable part of a function.
    pub fn with_frozen_detached(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Outputs of every `stop_gradient` call so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.as_matrix_dims();
        let (k2, n) = vb.as_matrix_dims();
        if va.shape().len() != 2 || vb.shape().len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = kernels::matmul(va.data(), vb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `x` viewed as `[rows × k]`, `w` `[k×n]`, `b` `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (m, k) = vx.as_matrix_dims();
        let (k2, n) = vw.as_matrix_dims();
        if vw.shape().len() != 2 || k != k2 {
            return Err(Error::shape(
                "linear",
                format!("{:?} x {:?}", vx.shape(), vw.shape()),
            ));
        }
        let mut out = kernels::matmul(vx.data(), vw.data(), m, k, n);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != n {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for width {n}", vb.shape()),
                ));
            }
            for row in out.chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let (_, n) = vx.as_matrix_dims();
        if vr.len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", vx.shape(), vr.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for r in data.chunks_exact_mut(n) {
            for (o, v) in r.iter_mut().zip(vr.data()) {
                *o += v;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let vx = self.value(x);
        let data = match kind {
            Activation::Gelu => vx.data().iter().map(|&v| kernels::gelu(v)).collect(),
            Activation::Relu => vx.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Activation(x, kind), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        if !vx.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vx.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = data[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    data[base + j * inner] = *b;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = vx.as_matrix_dims();
        if vg.len() != n || vb.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for (row, o) in vx.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, (oj, xj)) in o.iter_mut().zip(row).enumerate() {
                *oj = (xj - mean) * rstd * vg.data()[j] + vb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidArgument(format!(
                "reduction axes {axes:?} for shape {shape:?}"
            )));
        }
        let count: usize = sorted.iter().map(|&a| shape[a]).product();
        if count == 0 || vx.is_empty() {
            return Err(Error::Empty(format!(
                "reduction over axes {axes:?} of shape {shape:?}"
            )));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|a| !sorted.contains(a)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        // Output stride for every input axis; zero on reduced axes.
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for &a in kept.iter().rev() {
            out_strides[a] = stride;
            stride *= shape[a];
        }
        let mut map = Vec::with_capacity(vx.len());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..vx.len() {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        for (v, &o) in vx.data().iter().zip(&map) {
            out[o] += v;
        }
        if mean {
            for o in &mut out {
                *o *= scale;
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reduce { x, map, scale }, rg))
    }

    /// Arithmetic mean over `axes`; the reduced axes are removed.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).shape().len()).collect();
        self.reduce(x, &axes, false)
    }

    /// Forward identity; no gradient ever flows back through this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &self.frozen {
            Some(vals) => {
                let v = vals.get(self.frozen_cursor).cloned().ok_or_else(|| {
                    Error::InvalidArgument("frozen detach replay exhausted".into())
                })?;
                same_shape("stop_gradient replay", &v, self.value(x))?;
                self.frozen_cursor += 1;
                v
            }
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        Ok(self.push(value, Op::StopGradient, false))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Rows `idx` of `x` (viewed as a matrix over its last axis).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.as_matrix_dims();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} of {rows}"),
                ));
            }
            data.extend_from_slice(vx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).as_matrix_dims().1)
            .ok_or_else(|| Error::Empty("concat_rows with no inputs".into()))?;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.as_matrix_dims().1 != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {cols}", vp.as_matrix_dims().1),
                ));
            }
            data.extend_from_slice(vp.data());
        }
        let rows = data.len() / cols;
        let t = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch·seq × 3d]` with each row laid out `[q | k | v]`;
    /// head `h` uses columns `h·d/heads..(h+1)·d/heads` of each part.
    /// Returns the concatenated head outputs `[batch·seq × d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let vq = self.value(qkv);
        let (rows, width) = vq.as_matrix_dims();
        if rows != batch * seq || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {:?} for batch {batch}, seq {seq}, heads {heads}", vq.shape()),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = vq.data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let (mut q, mut k, mut v) = (vec![0.0; seq * dh], vec![0.0; seq * dh], vec![0.0; seq * dh]);
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let r = &src[(b * seq + s) * width..(b * seq + s + 1) * width];
                    q[s * dh..(s + 1) * dh].copy_from_slice(&r[h * dh..(h + 1) * dh]);
                    k[s * dh..(s + 1) * dh].copy_from_slice(&r[d + h * dh..d + (h + 1) * dh]);
                    v[s * dh..(s + 1) * dh]
                        .copy_from_slice(&r[2 * d + h * dh..2 * d + (h + 1) * dh]);
                }
                let mut p = kernels::matmul_nt(&q, &k, seq, dh, seq);
                for row in p.chunks_exact_mut(seq) {
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    kernels::softmax_in_place(row);
                }
                let o = kernels::matmul(&p, &v, seq, seq, dh);
                for s in 0..seq {
                    out[(b * seq + s) * d + h * dh..(b * seq + s) * d + (h + 1) * dh]
                        .copy_from_slice(&o[s * dh..(s + 1) * dh]);
                }
                let off = (b * heads + h) * seq * seq;
                probs[off..off + seq * seq].copy_from_slice(&p);
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights saved by an [`Graph::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.0)?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, k) = vl.as_matrix_dims();
        if rows != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows for {} labels", labels.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::Empty("cross_entropy over no rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        if !vl.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in vl.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += (max - row[label]) + (sum - 1.0).ln_1p();
        }
        for row in probs.chunks_exact_mut(k) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let live = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.as_matrix_dims();
                let n = vb.as_matrix_dims().1;
                if live(*a) {
                    accumulate(&mut grads[a.0], kernels::matmul_nt(g, vb.data(), m, n, k));
                }
                if live(*b) {
                    accumulate(&mut grads[b.0], kernels::matmul_tn(va.data(), g, m, k, n));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (m, k) = vx.as_matrix_dims();
                let n = vw.as_matrix_dims().1;
                if live(*x) {
                    accumulate(&mut grads[x.0], kernels::matmul_nt(g, vw.data(), m, n, k));
                }
                if live(*w) {
                    accumulate(&mut grads[w.0], kernels::matmul_tn(vx.data(), g, m, k, n));
                }
                if let Some(b) = b.filter(|b| live(*b)) {
                    accumulate(&mut grads[b.0], column_sums(g, n));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if live(*v) {
                        accumulate(&mut grads[v.0], g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if live(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if live(*a) {
                    let c = g.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], c);
                }
                if live(*b) {
                    let c = g.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], c);
                }
            }
            Op::AddRow(x, row) => {
                if live(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if live(*row) {
                    let n = self.value(*row).len();
                    accumulate(&mut grads[row.0], column_sums(g, n));
                }
            }
            Op::Scale(x, s) => {
                if live(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * s).collect());
                }
            }
            Op::Activation(x, kind) => {
                if live(*x) {
                    let vx = self.value(*x).data();
                    let c = match kind {
                        Activation::Gelu => g
                            .iter()
                            .zip(vx)
                            .map(|(g, &x)| g * kernels::gelu_grad(x))
                            .collect(),
                        Activation::Relu => g
                            .iter()
                            .zip(vx)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads[x.0], c);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if live(*x) {
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dotp: f64 = (0..*len)
                                .map(|j| y[base + j * inner] * g[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dotp);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gain).data();
                let (_, n) = vx.as_matrix_dims();
                let mut dx = vec![0.0; vx.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, (xr, gr)) in vx.data().chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                    for j in 0..n {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * vg[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if live(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if live(*gain) {
                    accumulate(&mut grads[gain.0], dgain);
                }
                if live(*bias) {
                    accumulate(&mut grads[bias.0], dbias);
                }
            }
            Op::Reduce { x, map, scale } => {
                if live(*x) {
                    accumulate(&mut grads[x.0], map.iter().map(|&o| g[o] * scale).collect());
                }
            }
            Op::Reshape(x) => {
                if live(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            Op::GatherRows { x, idx } => {
                if live(*x) {
                    let vx = self.value(*x);
                    let (_, cols) = vx.as_matrix_dims();
                    let mut dx = vec![0.0; vx.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, s) in dx[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if live(*p) {
                        accumulate(&mut grads[p.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                if live(*qkv) {
                    let dq = attention_backward(
                        self.value(*qkv).data(),
                        g,
                        probs,
                        *batch,
                        *seq,
                        *heads,
                    );
                    accumulate(&mut grads[qkv.0], dq);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if live(*logits) {
                    let k = self.value(*logits).as_matrix_dims().1;
                    let scale = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] -= scale;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
        }
    }
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn attention_backward(
    src: &[f64],
    g: &[f64],
    probs: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
) -> Vec<f64> {
    let width = src.len() / (batch * seq);
    let d = width / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dsrc = vec![0.0; src.len()];
    let mut q = vec![0.0; seq * dh];
    let mut k = vec![0.0; seq * dh];
    let mut v = vec![0.0; seq * dh];
    let mut dout = vec![0.0; seq * dh];
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                let row = (b * seq + s) * width;
                q[s * dh..(s + 1) * dh].copy_from_slice(&src[row + h * dh..row + (h + 1) * dh]);
                k[s * dh..(s + 1) * dh]
                    .copy_from_slice(&src[row + d + h * dh..row + d + (h + 1) * dh]);
                v[s * dh..(s + 1) * dh]
                    .copy_from_slice(&src[row + 2 * d + h * dh..row + 2 * d + (h + 1) * dh]);
                let grow = (b * seq + s) * d;
                dout[s * dh..(s + 1) * dh].copy_from_slice(&g[grow + h * dh..grow + (h + 1) * dh]);
            }
            let off = (b * heads + h) * seq * seq;
            let p = &probs[off..off + seq * seq];
            let dv = kernels::matmul_tn(p, &dout, seq, seq, dh);
            let mut ds = kernels::matmul_nt(&dout, &v, seq, dh, seq);
            for (dsr, pr) in ds.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dotp = kernels::dot(dsr, pr);
                for (x, pv) in dsr.iter_mut().zip(pr) {
                    *x = pv * (*x - dotp) * scale;
                }
            }
            let dq = kernels::matmul(&ds, &k, seq, seq, dh);
            let dk = kernels::matmul_tn(&ds, &q, seq, seq, dh);
            for s in 0..seq {
                let row = (b * seq + s) * width;
                for j in 0..dh {
                    dsrc[row + h * dh + j] += dq[s * dh + j];
                    dsrc[row + d + h * dh + j] += dk[s * dh + j];
                    dsrc[row + 2 * d + h * dh + j] += dv[s * dh + j];
                }
            }
        }
    }
    dsrc
}

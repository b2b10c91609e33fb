//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every executed operation in order, so node inputs
//! always precede the node itself. [`Graph::backward`] walks that record once
//! in reverse and writes `∂loss/∂leaf` into every leaf created with
//! `requires_grad`.
//!
//! Operations treat a tensor as a stack of slices along its last axis; the
//! only broadcast is [`Graph::add_bias`], which adds a vector to every slice.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: Scalar,
    },
    Exp {
        x: Var,
    },
    Ln {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Scalar>,
        rstd: Vec<Scalar>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<Scalar>,
    },
    Assemble {
        sources: Vec<Var>,
        map: Vec<(usize, usize)>,
    },
    Pick {
        x: Var,
        entries: Vec<(usize, usize)>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// New constant leaf holding a copy of `x`'s value; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient written by the last [`Graph::backward`], for leaves that require it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, rg))
    }

    /// `x[...×k] · w[n×k]ᵀ`: an unbiased linear map with an out×in weight.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul_nt", w)?;
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&k) {
            return Err(Error::shape("matmul_nt", &xs, self.shape(w)));
        }
        let m = self.value(x).rows();
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMulNt { a: x, b: w }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(Scalar, Scalar) -> Scalar) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        let vx = self.value(x);
        Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Adds `bias[n]` to every slice of `x[...×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &bv) in chunk.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: Scalar) -> Var {
        let out = self.map(x, |v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, Scalar::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp { x }, rg)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "ln",
                msg: format!("input {bad} is not positive"),
            });
        }
        let out = self.map(x, Scalar::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Ln { x }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    /// Layer normalization over the last axis, followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let inv_n = 1.0 / n as Scalar;
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<Scalar>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() * inv_n;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row gather from `table[C×d]`: the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (c, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows needs at least one id"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= c {
                return Err(Error::TokenId { id, size: c });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op,
                msg: "NaN input".into(),
            });
        }
        Ok(())
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", x)?;
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(src, dst);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x }, rg))
    }

    /// Multi-head scaled dot-product attention over `[N×d]` inputs holding
    /// `N / seq_len` independent sequences. Row `i` of a sequence attends to
    /// rows `0..=i` of the same sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("causal_attention", q)?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::shape("causal_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || n % seq_len != 0 {
            return Err(Error::contract(format!(
                "causal_attention: {n}×{d} input with {heads} heads and sequence length {seq_len}"
            )));
        }
        let dh = d / heads;
        let blocks = n / seq_len;
        let scale = 1.0 / (dh as Scalar).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; blocks * heads * seq_len * seq_len];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; seq_len];
        for b in 0..blocks {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let ri = b * seq_len + i;
                    let qi = &qd[ri * d + off..ri * d + off + dh];
                    for (j, s) in scores[..=i].iter_mut().enumerate() {
                        let rj = b * seq_len + j;
                        *s = dot(qi, &kd[rj * d + off..rj * d + off + dh]) * scale;
                    }
                    let base = ((b * heads + h) * seq_len + i) * seq_len;
                    let p = &mut probs[base..base + i + 1];
                    softmax_row(&scores[..=i], p);
                    let oi = &mut out[ri * d + off..ri * d + off + dh];
                    for (j, &pij) in p.iter().enumerate() {
                        let rj = b * seq_len + j;
                        for (o, &vv) in oi.iter_mut().zip(&vd[rj * d + off..rj * d + off + dh]) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    /// Builds a `[map.len() × cols]` tensor whose row `r` is row `map[r].1`
    /// of `sources[map[r].0]`. Concatenation and row selection are special cases.
    pub fn assemble_rows(&mut self, sources: &[Var], map: &[(usize, usize)]) -> Result<Var> {
        let first = *sources
            .first()
            .ok_or_else(|| Error::contract("assemble_rows needs a source"))?;
        let cols = self.value(first).cols();
        for &s in sources {
            let t = self.value(s);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::shape("assemble_rows", self.shape(first), t.shape()));
            }
        }
        if map.is_empty() {
            return Err(Error::contract("assemble_rows needs at least one row"));
        }
        let mut out = Vec::with_capacity(map.len() * cols);
        for &(src, row) in map {
            let var = *sources
                .get(src)
                .ok_or_else(|| Error::contract(format!("assemble_rows: no source {src}")))?;
            let t = &self.nodes[var.0].value;
            if row >= t.rows() {
                return Err(Error::contract(format!(
                    "assemble_rows: row {row} out of range for {:?}",
                    t.shape()
                )));
            }
            out.extend_from_slice(t.row(row));
        }
        let rg = self.rg(sources);
        Ok(self.push(
            Tensor::from_parts(vec![map.len(), cols], out),
            Op::Assemble {
                sources: sources.to_vec(),
                map: map.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let map: Vec<_> = rows.iter().map(|&r| (0, r)).collect();
        self.assemble_rows(&[x], &map)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut map = Vec::new();
        for (i, &p) in parts.iter().enumerate() {
            let rows = self.value(p).rows();
            map.extend((0..rows).map(|r| (i, r)));
        }
        self.assemble_rows(parts, &map)
    }

    /// Vector of the elements `x[row, col]` listed in `entries`.
    pub fn pick(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if entries.is_empty() {
            return Err(Error::contract("pick needs at least one entry"));
        }
        let mut out = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(Error::contract(format!("pick: ({r}, {c}) outside {rows}×{cols}")));
            }
            out.push(xv.data()[r * cols + c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Pick {
                x,
                entries: entries.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<Scalar>() / t.numel() as Scalar;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Computes `∂loss/∂leaf` for every leaf that requires a gradient.
    ///
    /// Leaves the loss does not reach get a zero gradient. Running backward
    /// again overwrites the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            backprop(&self.nodes, node, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<Scalar>>], v: Var) -> Option<&'a mut Vec<Scalar>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_nt_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::MatMulNt { a, b } => {
            let (n, k) = (val(*b).shape()[0], val(*b).shape()[1]);
            let m = val(*a).rows();
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_tn_acc(g, val(*a).data(), gb, m, n, k);
            }
        }
        Op::Add { a, b } => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                }
            }
        }
        Op::Sub { a, b } => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *o += x * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((o, &x), &y) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *o += x * y;
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
            let n = val(*bias).numel();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for chunk in g.chunks(n) {
                    gb.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(o, &v)| *o += factor * v);
            }
        }
        Op::Exp { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(node.value.data()) {
                    *o += gv * y;
                }
            }
        }
        Op::Ln { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    *o += gv / xv;
                }
            }
        }
        Op::Gelu { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                    *o += gv * gelu_grad(xv);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = val(*gamma).numel();
            let gam = val(*gamma).data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        gg[c] += gr[c] * hr[c];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(n) {
                    gb.iter_mut().zip(gr).for_each(|(o, &v)| *o += v);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_n = 1.0 / n as Scalar;
                let mut dxhat = vec![0.0; n];
                for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..n {
                        dxhat[c] = gr[c] * gam[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hr[c];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    let out = &mut gx[r * n..(r + 1) * n];
                    for c in 0..n {
                        out[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let d = val(*table).cols();
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                }
            }
        }
        Op::Softmax { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = node.value.cols();
                for ((gr, yr), out) in g.chunks(n).zip(node.value.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(gr, yr);
                    for c in 0..n {
                        out[c] += yr[c] * (gr[c] - s);
                    }
                }
            }
        }
        Op::LogSoftmax { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = node.value.cols();
                for ((gr, yr), out) in g.chunks(n).zip(node.value.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: Scalar = gr.iter().sum();
                    for c in 0..n {
                        out[c] += gr[c] - yr[c].exp() * s;
                    }
                }
            }
        }
        Op::CausalAttention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), *heads, *seq_len, probs);
        }
        Op::Assemble { sources, map } => {
            let cols = node.value.cols();
            for (r, &(src, row)) in map.iter().enumerate() {
                if let Some(gs) = slot(nodes, grads, sources[src]) {
                    let from = &g[r * cols..(r + 1) * cols];
                    gs[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(from)
                        .for_each(|(o, &v)| *o += v);
                }
            }
        }
        Op::Pick { x, entries } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let cols = val(*x).cols();
                for (&(r, c), &gv) in entries.iter().zip(g) {
                    gx[r * cols + c] += gv;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / gx.len() as Scalar;
                gx.iter_mut().for_each(|o| *o += s);
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Scalar>>],
    g: &[Scalar],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    seq_len: usize,
    probs: &[Scalar],
) {
    let qv = nodes[q.0].value.data();
    let kv = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let (n, d) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
    let dh = d / heads;
    let blocks = n / seq_len;
    let scale = 1.0 / (dh as Scalar).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut ds = vec![0.0; seq_len];
    for b in 0..blocks {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq_len {
                let ri = b * seq_len + i;
                let goi = &g[ri * d + off..ri * d + off + dh];
                let base = ((b * heads + h) * seq_len + i) * seq_len;
                let p = &probs[base..base + i + 1];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let rj = b * seq_len + j;
                    ds[j] = dot(goi, &vv[rj * d + off..rj * d + off + dh]);
                    weighted += p[j] * ds[j];
                }
                for j in 0..=i {
                    let rj = b * seq_len + j;
                    let s = p[j] * (ds[j] - weighted) * scale;
                    for c in 0..dh {
                        dq[ri * d + off + c] += s * kv[rj * d + off + c];
                        dk[rj * d + off + c] += s * qv[ri * d + off + c];
                        dv[rj * d + off + c] += p[j] * goi[c];
                    }
                }
            }
        }
    }
    for (var, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gs) = slot(nodes, grads, var) {
            gs.iter_mut().zip(&local).for_each(|(o, &x)| *o += x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m2 = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = g.matmul(p, m2).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0; 4]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let x = g.constant(Tensor::from_vec(
            vec![1.0, 2.0, 3.0].into_iter().map(Scalar::ln).collect(),
        ));
        let y = g.softmax(x).unwrap();
        for (p, e) in g.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - e).abs() < 1e-12);
        }

        let x = g.constant(Tensor::from_vec(vec![1.0, Scalar::NAN]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn ln_rejects_nonpositive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.ln(x), Err(Error::Domain { .. })));
        let x = g.constant(Tensor::from_vec(vec![-2.0]));
        assert!(matches!(g.ln(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.5));
        let gamma = g.constant(Tensor::full(&[5], 1.0));
        let beta = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_identity_row_is_one_hot() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::eye(5));
        let y = g.gather_rows(table, &[3]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            g.gather_rows(table, &[5]),
            Err(Error::TokenId { id: 5, size: 5 })
        ));
    }

    #[test]
    fn backward_sum_and_product() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(-5.0), true);
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-5.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // d(x * stopgrad(x))/dx = stopgrad(x)
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let unused = g.leaf(Tensor::from_vec(vec![4.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn attention_single_row_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[1, 4], &[0.5, 0.5, 0.5, 0.5]));
        let v = g.constant(t(&[1, 4], &[9.0, 8.0, 7.0, 6.0]));
        let y = g.causal_attention(q, k, v, 2, 1).unwrap();
        assert_eq!(g.value(y).data(), &[9.0, 8.0, 7.0, 6.0]);
    }
}

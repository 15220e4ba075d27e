//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Operands always
//! precede their results, so [`Tape::backward`] only has to walk the nodes in
//! reverse recorded order, visiting each one at most once. Results that do not
//! depend on any trainable leaf are recorded as constants and dropped from the
//! backward pass.
//!
//! Leaves created from tensors with `requires_grad` set report their gradient
//! under the tensor's [`TensorId`], so a parameter registered twice receives
//! the sum of both contributions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::layers::Activation;
use crate::tensor::{Tensor, TensorId};

#[derive(Debug)]
enum Op {
    Constant,
    Leaf(TensorId),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Tanh { a: usize },
    Identity { a: usize },
    LogSoftmax { a: usize, cols: usize },
    Sum { a: usize },
    Mean { a: usize },
    Reshape { a: usize },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Slice { a: usize, start: usize, len: usize, width: usize },
    Conv2d { x: usize, w: usize, b: usize, batch: usize, out_ch: usize, geom: ConvGeom },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Nll { a: usize, targets: Vec<usize>, cols: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor. It is tracked for gradients iff `requires_grad` is set.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let op = if tensor.requires_grad() {
            Op::Leaf(tensor.id())
        } else {
            Op::Constant
        };
        let tracked = tensor.requires_grad();
        self.push(tensor.clone().with_requires_grad(false), op, tracked)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor.with_requires_grad(false), Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if tracked { op } else { Op::Constant };
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Concatenates tensors along their last dimension. All leading dimensions
    /// must agree.
    pub fn concat_last_dim<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_last_dim", "no parts given"))?;
        let lead = {
            let s = first.shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last_dim", &first.shape(), &s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let tracked = parts.iter().any(|p| p.tracked());
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id).zip(widths).collect(),
            rows,
        };
        Ok(self.push(Tensor::from_parts(shape, Arc::new(out)), op, tracked))
    }

    /// Computes gradients of a one-element `loss` with respect to every
    /// tracked leaf it depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        let mut out = Gradients::default();
        if !loss_node.tracked {
            return Ok(out);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            out.visited += 1;
            let node = &nodes[id];
            let mut ctx = Backprop {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Constant => {}
                Op::Leaf(tid) => {
                    match out.by_id.get_mut(tid) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                        None => {
                            out.by_id.insert(*tid, g.clone());
                        }
                    }
                    out.by_node.insert(id, g);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let (av, bv) = (ctx.data(a), ctx.data(b));
                    ctx.acc(a, |da| kernels::matmul_nt_acc(da, &g, &bv, m, n, k));
                    ctx.acc(b, |db| kernels::matmul_tn_acc(db, &av, &g, k, m, n));
                }
                &Op::MatMulNt { a, b, m, k, n } => {
                    // c = a · bᵀ with a: m×k, b: n×k
                    let (av, bv) = (ctx.data(a), ctx.data(b));
                    ctx.acc(a, |da| kernels::matmul_acc(da, &g, &bv, m, n, k));
                    ctx.acc(b, |db| kernels::matmul_tn_acc(db, &g, &av, n, m, k));
                }
                &Op::Transpose { a, rows, cols } => ctx.acc(a, |da| {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                }),
                &Op::Add { a, b } => {
                    ctx.acc(a, |da| add_into(da, &g));
                    ctx.acc(b, |db| add_into(db, &g));
                }
                &Op::Sub { a, b } => {
                    ctx.acc(a, |da| add_into(da, &g));
                    ctx.acc(b, |db| db.iter_mut().zip(&g).for_each(|(d, g)| *d -= g));
                }
                &Op::Mul { a, b } => {
                    let (av, bv) = (ctx.data(a), ctx.data(b));
                    ctx.acc(a, |da| {
                        for ((d, g), b) in da.iter_mut().zip(&g).zip(bv.iter()) {
                            *d += g * b;
                        }
                    });
                    ctx.acc(b, |db| {
                        for ((d, g), a) in db.iter_mut().zip(&g).zip(av.iter()) {
                            *d += g * a;
                        }
                    });
                }
                &Op::AddBias { a, bias } => {
                    ctx.acc(a, |da| add_into(da, &g));
                    ctx.acc(bias, |db| {
                        let n = db.len();
                        for row in g.chunks_exact(n) {
                            add_into(db, row);
                        }
                    });
                }
                &Op::Scale { a, factor } => ctx.acc(a, |da| {
                    da.iter_mut().zip(&g).for_each(|(d, g)| *d += factor * g)
                }),
                &Op::Relu { a } => {
                    let av = ctx.data(a);
                    ctx.acc(a, |da| {
                        for ((d, g), x) in da.iter_mut().zip(&g).zip(av.iter()) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                &Op::Tanh { a } => {
                    let y = node.value.data();
                    ctx.acc(a, |da| {
                        for ((d, g), y) in da.iter_mut().zip(&g).zip(y) {
                            *d += g * (1.0 - y * y);
                        }
                    });
                }
                &Op::Identity { a } | &Op::Reshape { a } => ctx.acc(a, |da| add_into(da, &g)),
                &Op::LogSoftmax { a, cols } => {
                    let y = node.value.data();
                    ctx.acc(a, |da| {
                        for ((d, g), y) in da
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(y.chunks_exact(cols))
                        {
                            let gsum: f64 = g.iter().sum();
                            for j in 0..cols {
                                d[j] += g[j] - y[j].exp() * gsum;
                            }
                        }
                    });
                }
                &Op::Sum { a } => ctx.acc(a, |da| da.iter_mut().for_each(|d| *d += g[0])),
                &Op::Mean { a } => ctx.acc(a, |da| {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += s)
                }),
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        ctx.acc(p, |dp| {
                            for r in 0..*rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                add_into(&mut dp[r * w..(r + 1) * w], src);
                            }
                        });
                        offset += w;
                    }
                }
                &Op::Slice { a, start, len, width } => ctx.acc(a, |da| {
                    for (r, src) in g.chunks_exact(len).enumerate() {
                        add_into(&mut da[r * width + start..r * width + start + len], src);
                    }
                }),
                &Op::Conv2d { x, w, b, batch, out_ch, geom } => {
                    let (xv, wv) = (ctx.data(x), ctx.data(w));
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let in_size = geom.channels * geom.height * geom.width;
                    let mut col = vec![0.0; rows * cols];
                    let mut dcol = vec![0.0; rows * cols];
                    let need_x = ctx.tracked(x);
                    let need_w = ctx.tracked(w);
                    let mut dw = vec![0.0; wv.len()];
                    let mut dx = need_x.then(|| vec![0.0; xv.len()]);
                    for s in 0..batch {
                        let gs = &g[s * out_ch * cols..(s + 1) * out_ch * cols];
                        if need_w {
                            kernels::im2col(&xv[s * in_size..(s + 1) * in_size], geom, &mut col);
                            kernels::matmul_nt_acc(&mut dw, gs, &col, out_ch, cols, rows);
                        }
                        if let Some(dx) = dx.as_mut() {
                            dcol.iter_mut().for_each(|v| *v = 0.0);
                            kernels::matmul_tn_acc(&mut dcol, &wv, gs, rows, out_ch, cols);
                            kernels::col2im_acc(&dcol, geom, &mut dx[s * in_size..(s + 1) * in_size]);
                        }
                    }
                    if let Some(dx) = dx {
                        ctx.acc(x, |d| add_into(d, &dx));
                    }
                    ctx.acc(w, |d| add_into(d, &dw));
                    ctx.acc(b, |db| {
                        // output planes cycle through channels sample by sample
                        for (i, plane) in g.chunks_exact(cols).enumerate() {
                            db[i % out_ch] += plane.iter().sum::<f64>();
                        }
                    });
                }
                Op::MaxPool2d { x, argmax } => ctx.acc(*x, |dx| {
                    for (&src, g) in argmax.iter().zip(&g) {
                        dx[src] += g;
                    }
                }),
                Op::Nll { a, targets, cols } => ctx.acc(*a, |da| {
                    let s = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        da[r * cols + t] -= s;
                    }
                }),
            }
        }
        Ok(out)
    }
}

struct Backprop<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Backprop<'_> {
    fn data(&self, id: usize) -> Arc<Vec<f64>> {
        Arc::clone(self.nodes[id].value.shared_data())
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes[id].tracked
    }

    fn acc(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].tracked {
            return;
        }
        let n = self.nodes[id].value.numel();
        let slot = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<TensorId, Vec<f64>>,
    by_node: HashMap<usize, Vec<f64>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for a registered tensor, summed over all of its leaves.
    pub fn get(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&tensor.id()).map(Vec::as_slice)
    }

    /// Gradient for one specific leaf variable.
    pub fn wrt(&self, leaf: Var<'_>) -> Option<&[f64]> {
        self.by_node.get(&leaf.id).map(Vec::as_slice)
    }

    /// Adds this pass's gradient into the tensor's gradient slot. Trainable
    /// tensors the loss does not depend on receive zeros.
    pub fn accumulate_into(&self, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        match self.by_id.get(&tensor.id()) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn unary(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var<'t> {
        self.tape
            .push(Tensor::from_parts(shape, Arc::new(data)), op, self.tracked())
    }

    fn binary(&self, other: &Var<'t>, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var<'t> {
        let tracked = self.tracked() || other.tracked();
        self.tape
            .push(Tensor::from_parts(shape, Arc::new(data)), op, tracked)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&mut out, a.data(), b.data(), m, k, n);
        Ok(self.binary(rhs, vec![m, n], out, Op::MatMul { a: self.id, b: rhs.id, m, k, n }))
    }

    /// `self · rhsᵀ` for `self: [m×k]`, `rhs: [n×k]`.
    pub fn matmul_nt(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(&mut out, a.data(), b.data(), m, k, n);
        Ok(self.binary(rhs, vec![m, n], out, Op::MatMulNt { a: self.id, b: rhs.id, m, k, n }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a.data()[r * cols + c];
            }
        }
        Ok(self.unary(vec![cols, rows], out, Op::Transpose { a: self.id, rows, cols }))
    }

    fn elementwise(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.binary(rhs, a.shape().to_vec(), out, op))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "add", |x, y| x + y, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "sub", |x, y| x - y, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "mul", |x, y| x * y, Op::Mul { a: self.id, b: rhs.id })
    }

    /// Adds a 1-d bias across the last dimension.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let (a, b) = (self.value(), bias.value());
        let n = b.numel();
        if b.rank() != 1 || a.shape().last() != Some(&n) {
            return Err(Error::shape("add_bias", a.shape(), b.shape()));
        }
        let out = a
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        Ok(self.binary(bias, a.shape().to_vec(), out, Op::AddBias { a: self.id, bias: bias.id }))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x * factor).collect();
        self.unary(a.shape().to_vec(), out, Op::Scale { a: self.id, factor })
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.unary(a.shape().to_vec(), out, Op::Relu { a: self.id })
    }

    pub fn tanh(&self) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x.tanh()).collect();
        self.unary(a.shape().to_vec(), out, Op::Tanh { a: self.id })
    }

    /// Pass-through recorded as its own node; values are shared, not copied.
    pub fn identity(&self) -> Var<'t> {
        let a = self.value();
        let value = Tensor::from_parts(a.shape().to_vec(), Arc::clone(a.shared_data()));
        self.tape.push(value, Op::Identity { a: self.id }, self.tracked())
    }

    pub fn activation(&self, act: Activation) -> Var<'t> {
        match act {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
            Activation::Identity => self.identity(),
        }
    }

    /// Row-wise log-softmax of a 2-d input.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("log_softmax", a.shape(), &[]));
        }
        let cols = a.shape()[1];
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        Ok(self.unary(a.shape().to_vec(), out, Op::LogSoftmax { a: self.id, cols }))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.unary(Vec::new(), vec![total], Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let m = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.unary(Vec::new(), vec![m], Op::Mean { a: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, self.tracked()))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last_dim(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let width = a.shape().last().copied().unwrap_or(1);
        if a.rank() == 0 || len == 0 || start + len > width {
            return Err(Error::Shape {
                op: "slice_last_dim",
                lhs: a.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = a
            .data()
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.unary(shape, out, Op::Slice { a: self.id, start, len, width }))
    }

    /// Stride-1 unpadded cross-correlation of `[n×c×h×w]` with `[o×c×k×k]`
    /// plus a per-channel bias.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weight);
        self.same_tape(bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        };
        if geom.height < geom.kernel || geom.width < geom.kernel {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        if b.shape() != [out_ch] {
            return Err(Error::shape("conv2d bias", sw, b.shape()));
        }
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.channels * geom.height * geom.width;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; batch * out_ch * cols];
        for s in 0..batch {
            kernels::im2col(&x.data()[s * in_size..(s + 1) * in_size], geom, &mut col);
            let dst = &mut out[s * out_ch * cols..(s + 1) * out_ch * cols];
            for (plane, &bv) in dst.chunks_exact_mut(cols).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
            kernels::matmul_acc(dst, w.data(), &col, out_ch, rows, cols);
        }
        let tracked = self.tracked() || weight.tracked() || bias.tracked();
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
            batch,
            out_ch,
            geom,
        };
        let shape = vec![batch, out_ch, geom.out_h(), geom.out_w()];
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, Arc::new(out)), op, tracked))
    }

    /// Non-overlapping 2×2 max pooling over `[n×c×h×w]` with even `h`, `w`.
    /// Ties resolve to the first element in row-major order.
    pub fn maxpool2d(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("maxpool2d", s, &[2, 2]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let data = x.data();
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.unary(vec![s[0], s[1], oh, ow], out, Op::MaxPool2d { x: self.id, argmax }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-probabilities `[n×c]`.
    pub fn nll(&self, targets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("nll", s, &[targets.len()]));
        }
        let cols = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::contract(
                "nll",
                format!("class id {bad} out of range for {cols} classes"),
            ));
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| a.data()[r * cols + t])
            .sum();
        let value = -total / targets.len() as f64;
        let op = Op::Nll {
            a: self.id,
            targets: targets.to_vec(),
            cols,
        };
        Ok(self.unary(Vec::new(), vec![value], op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        t(shape, data).with_requires_grad(true)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(i.matmul(&b).unwrap().value().data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let c = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let out = r.matmul(&c).unwrap().value();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn elementwise_ops() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let z = tape.leaf(&t(&[2], &[0.0, 0.0]));
        assert_eq!(a.add(&z).unwrap().value().data(), &[1.0, 2.0]);

        let x = tape.leaf(&t(&[2], &[2.0, 3.0]));
        let y = tape.leaf(&t(&[2], &[4.0, 5.0]));
        assert_eq!(x.mul(&y).unwrap().value().data(), &[8.0, 15.0]);
        assert_eq!(x.sub(&y).unwrap().value().data(), &[-2.0, -2.0]);

        let base = tape.leaf(&Tensor::zeros(&[2, 3]));
        let bias = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(
            base.add_bias(&bias).unwrap().value().data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
        assert!(x.add(&base).is_err());
        assert!(base.add_bias(&x).is_err());
    }

    #[test]
    fn activations() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let id = x.identity().value();
        assert_eq!(id.data(), x.value().data());

        let z = tape.leaf(&Tensor::zeros(&[1, 2]));
        let ls = z.log_softmax().unwrap().value();
        let ln2 = std::f64::consts::LN_2;
        assert!((ls.data()[0] + ln2).abs() < 1e-15);
        assert!((ls.data()[1] + ln2).abs() < 1e-15);
        assert!(x.log_softmax().is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let w = p(&[2], &[3.0, -2.0]);
        let tape = Tape::new();
        let wv = tape.leaf(&w);
        let loss = wv.mul(&wv).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn backward_constant_loss_is_noop() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.visited(), 0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = p(&[2], &[1.0, 2.0]);
        let tape = Tape::new();
        let v = tape.leaf(&w);
        assert!(matches!(
            tape.backward(v.relu()),
            Err(Error::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        // loss = sum(w*x) + sum(w*y) through one leaf vs two leaves of the same tensor
        let w = p(&[3], &[0.5, -1.0, 2.0]);
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let y = t(&[3], &[-4.0, 0.5, 1.0]);

        let tape = Tape::new();
        let wv = tape.leaf(&w);
        let l = wv
            .mul(&tape.leaf(&x))
            .unwrap()
            .sum()
            .add(&wv.mul(&tape.leaf(&y)).unwrap().sum())
            .unwrap();
        let g_shared = tape.backward(l).unwrap().get(&w).unwrap().to_vec();

        let tape = Tape::new();
        let w1 = tape.leaf(&w);
        let w2 = tape.leaf(&w);
        let l = w1
            .mul(&tape.leaf(&x))
            .unwrap()
            .sum()
            .add(&w2.mul(&tape.leaf(&y)).unwrap().sum())
            .unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &g_shared[..]);
        assert_eq!(grads.wrt(w1).unwrap(), x.data());
        assert_eq!(grads.wrt(w2).unwrap(), y.data());
        assert_eq!(g_shared, vec![-3.0, 2.5, 4.0]);
    }

    #[test]
    fn visits_each_tracked_node_once() {
        let w = p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let tape = Tape::new();
        let x = tape.leaf(&w);
        let h = x.matmul(&x).unwrap().tanh();
        let loss = h.add(&x).unwrap().mean();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.len(), 5);
        assert_eq!(grads.visited(), 5);
    }

    #[test]
    fn untracked_results_are_constants() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::full(&[2], 1.0));
        let b = a.relu().sum();
        assert!(!b.tracked());
        assert_eq!(tape.backward(b).unwrap().visited(), 0);
    }

    #[test]
    fn slice_and_concat_partition() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let head = x.slice_last_dim(0, 2).unwrap();
        assert_eq!(head.value().data(), &[1.0, 2.0]);
        let tail = x.slice_last_dim(2, 2).unwrap();
        let back = tape.concat_last_dim(&[head, tail]).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(x.slice_last_dim(3, 2).is_err());
        assert!(x.slice_last_dim(0, 0).is_err());
    }

    #[test]
    fn concat_routes_gradients_to_sources() {
        let a = p(&[2, 1], &[1.0, 2.0]);
        let b = p(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let tape = Tape::new();
        let c = tape.concat_last_dim(&[tape.leaf(&a), tape.leaf(&b)]).unwrap();
        let weights = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = c.mul(&weights).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[1.0, 4.0]);
        assert_eq!(grads.get(&b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn maxpool_value_and_ties() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.maxpool2d().unwrap().value().data(), &[4.0]);

        let xt = p(&[1, 1, 2, 2], &[7.0, 7.0, 7.0, 7.0]);
        let tape = Tape::new();
        let loss = tape.leaf(&xt).maxpool2d().unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&xt).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

        let tape = Tape::new();
        let odd = tape.leaf(&Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(odd.maxpool2d(), Err(Error::Shape { .. })));
    }

    #[test]
    fn nll_of_uniform_is_ln_c() {
        let tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros(&[3, 7]));
        let loss = z.log_softmax().unwrap().nll(&[0, 3, 6]).unwrap();
        assert!((loss.value().item() - 7f64.ln()).abs() < 1e-14);
        assert!(z.nll(&[0, 1, 7]).is_err());
    }

    #[test]
    fn conv_constant_field() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1, 1, 28, 28], 1.0));
        let w = tape.leaf(&Tensor::full(&[1, 1, 5, 5], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let y = x.conv2d(&w, &b).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 24, 24]);
        assert!(y.data().iter().all(|&v| v == 25.0));
    }
}

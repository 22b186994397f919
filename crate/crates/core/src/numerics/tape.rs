//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! recorded in topological order, so [`Tape::backward`] simply walks the
//! node list in reverse. A tape built with [`Tape::no_grad`] records values
//! only and keeps no backward state.

use std::cell::{Ref, RefCell};

use super::attention::{
    linear_attention_backward, linear_attention_forward, softmax_attention_backward,
    softmax_attention_forward, LinearAttentionShape, Normalization,
};
use super::params::ParamId;
use super::tensor::{gemm_strided, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Elu(usize),
    Phi(usize),
    Relu(usize),
    Softmax(usize),
    Sum(usize),
    SumRows(usize),
    SegmentSum(usize, usize),
    AddRowwise(usize, usize),
    MulRowwise(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: usize,
        idx: Vec<usize>,
    },
    SliceRows {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Norm(usize),
    RowNorm(usize),
    Dot(usize, usize),
    RowDot(usize, usize),
    SegmentOuterSum {
        a: usize,
        b: usize,
        seg: usize,
    },
    LinearAttention {
        fq: usize,
        fk: usize,
        v: usize,
        s0: Option<usize>,
        z0: Option<usize>,
        segments: Vec<usize>,
        norm: Normalization,
    },
    SoftmaxAttention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<usize>,
        scale: f64,
        probs: Vec<f64>,
    },
    Bce {
        logits: usize,
        labels: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of a computation. Single-threaded; independent tapes may live
/// on different threads.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the variable; zeros when the root
    /// does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates values only.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by node values on this tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<f64>())
            .sum()
    }

    /// A leaf that requires grad when the tape records gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false, None)
    }

    pub(crate) fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, Some(id))
    }

    pub(crate) fn param_leaves(&self) -> Vec<(usize, ParamId)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect()
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].requires_grad);
        // Ops that only save state for the backward pass drop it when no
        // gradient will ever flow.
        let op = if requires_grad { op } else { strip(op) };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn check_same_tape(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variables from different tapes");
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_same_tape(root);
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let n = root.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[root.id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn strip(op: Op) -> Op {
    match op {
        Op::LayerNorm { x, gain, bias, .. } => Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        Op::SoftmaxAttention {
            q,
            k,
            v,
            segments,
            scale,
            ..
        } => Op::SoftmaxAttention {
            q,
            k,
            v,
            segments,
            scale,
            probs: Vec::new(),
        },
        other => other,
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let n = nodes[*b].value.cols();
            if let Some(da) = acc(grads, nodes, *a) {
                // dA (m×k) += G (m×n) · Bᵀ
                gemm_strided(g, (n, 1), val(*b), (1, n), da, m, n, k, 1.0);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                // dB (k×n) += Aᵀ · G
                gemm_strided(val(*a), (1, k), g, (n, 1), db, k, m, n, 1.0);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[*x].value.rows(), nodes[*x].value.cols());
            if let Some(dx) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, g.iter().copied());
            }
            if let Some(db) = acc(grads, nodes, *b) {
                if db.len() == 1 && g.len() != 1 {
                    db[0] += sign * g.iter().sum::<f64>();
                } else {
                    add_into(db, g.iter().map(|x| sign * x));
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let bscalar = bv.len() == 1 && av.len() != 1;
            if let Some(da) = acc(grads, nodes, *a) {
                if bscalar {
                    add_into(da, g.iter().map(|x| x * bv[0]));
                } else {
                    add_into(da, g.iter().zip(bv).map(|(x, y)| x * y));
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                if bscalar {
                    db[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                } else {
                    add_into(db, g.iter().zip(av).map(|(x, y)| x * y));
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let bscalar = bv.len() == 1 && av.len() != 1;
            let bat = |i: usize| if bscalar { bv[0] } else { bv[i] };
            if let Some(da) = acc(grads, nodes, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] / bat(i);
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    let bi = bat(i);
                    let v = -g[i] * av[i] / (bi * bi);
                    if bscalar {
                        db[0] += v;
                    } else {
                        db[i] += v;
                    }
                }
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g.iter().copied());
            }
        }
        Op::MulScalar(x, c) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g.iter().map(|v| v * c));
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g.iter().zip(out).map(|(a, b)| a * b));
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g.iter().zip(xv).map(|(a, b)| a / b));
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g.iter().zip(out).map(|(a, s)| a * s * (1.0 - s)));
            }
        }
        Op::Elu(x) | Op::Phi(x) => {
            let xv = val(*x);
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(
                    dx,
                    g.iter()
                        .zip(xv)
                        .map(|(a, &v)| if v > 0.0 { *a } else { a * v.exp() }),
                );
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(
                    dx,
                    g.iter().zip(xv).map(|(a, &v)| if v > 0.0 { *a } else { 0.0 }),
                );
            }
        }
        Op::Softmax(x) => {
            let c = node.value.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, (gr, yr)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let dotgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += yr[j] * (gr[j] - dotgy);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumRows(x) => {
            let c = nodes[*x].value.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for row in dx.chunks_mut(c) {
                    add_into(row, g.iter().copied());
                }
            }
        }
        Op::SegmentSum(x, seg) => {
            let c = nodes[*x].value.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    let s = r / seg;
                    add_into(row, g[s * c..(s + 1) * c].iter().copied());
                }
            }
        }
        Op::AddRowwise(x, b) => {
            let c = node.value.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                add_into(dx, g.iter().copied());
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for gr in g.chunks(c) {
                    add_into(db, gr.iter().copied());
                }
            }
        }
        Op::MulRowwise(x, s) => {
            let c = node.value.cols();
            let (xv, sv) = (val(*x), val(*s));
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, gr) in g.chunks(c).enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += gr[j] * sv[j];
                    }
                }
            }
            if let Some(ds) = acc(grads, nodes, *s) {
                for (gr, xr) in g.chunks(c).zip(xv.chunks(c)) {
                    add_into(ds, gr.iter().zip(xr).map(|(a, b)| a * b));
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = node.value.cols();
            let gv = val(*gain);
            if let Some(dx) = acc(grads, nodes, *x) {
                let mut dxh = vec![0.0; c];
                for (r, gr) in g.chunks(c).enumerate() {
                    let xh = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxh[j] = gr[j] * gv[j];
                    }
                    let mean_d = dxh.iter().sum::<f64>() / c as f64;
                    let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            }
            if let Some(dg) = acc(grads, nodes, *gain) {
                for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                    add_into(dg, gr.iter().zip(xh).map(|(a, b)| a * b));
                }
            }
            if let Some(db) = acc(grads, nodes, *bias) {
                for gr in g.chunks(c) {
                    add_into(db, gr.iter().copied());
                }
            }
        }
        Op::GatherRows { src, idx } => {
            let c = node.value.cols();
            if let Some(ds) = acc(grads, nodes, *src) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ds[i * c..(i + 1) * c], g[r * c..(r + 1) * c].iter().copied());
                }
            }
        }
        Op::SliceRows { src, start } => {
            let c = node.value.cols();
            if let Some(ds) = acc(grads, nodes, *src) {
                add_into(&mut ds[start * c..start * c + g.len()], g.iter().copied());
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(dp) = acc(grads, nodes, p) {
                    for r in 0..rows {
                        add_into(
                            &mut dp[r * pc..(r + 1) * pc],
                            g[r * total + off..r * total + off + pc].iter().copied(),
                        );
                    }
                }
                off += pc;
            }
        }
        Op::Norm(x) => {
            let xv = val(*x);
            let nrm = out[0];
            if let Some(dx) = acc(grads, nodes, *x) {
                if nrm > 0.0 {
                    add_into(dx, xv.iter().map(|v| g[0] * v / nrm));
                }
            }
        }
        Op::RowNorm(x) => {
            let c = nodes[*x].value.cols();
            let xv = val(*x);
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, xr) in xv.chunks(c).enumerate() {
                    if out[r] > 0.0 {
                        let f = g[r] / out[r];
                        add_into(&mut dx[r * c..(r + 1) * c], xr.iter().map(|v| f * v));
                    }
                }
            }
        }
        Op::Dot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = acc(grads, nodes, *a) {
                add_into(da, bv.iter().map(|v| g[0] * v));
            }
            if let Some(db) = acc(grads, nodes, *b) {
                add_into(db, av.iter().map(|v| g[0] * v));
            }
        }
        Op::RowDot(a, b) => {
            let c = nodes[*a].value.cols();
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = acc(grads, nodes, *a) {
                for (r, br) in bv.chunks(c).enumerate() {
                    add_into(&mut da[r * c..(r + 1) * c], br.iter().map(|v| g[r] * v));
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for (r, ar) in av.chunks(c).enumerate() {
                    add_into(&mut db[r * c..(r + 1) * c], ar.iter().map(|v| g[r] * v));
                }
            }
        }
        Op::SegmentOuterSum { a, b, seg } => {
            let (p, q) = (nodes[*a].value.cols(), nodes[*b].value.cols());
            let (av, bv) = (val(*a), val(*b));
            let rows = nodes[*a].value.rows();
            if let Some(da) = acc(grads, nodes, *a) {
                for r in 0..rows {
                    let gs = &g[(r / seg) * p * q..(r / seg + 1) * p * q];
                    let br = &bv[r * q..(r + 1) * q];
                    for i in 0..p {
                        da[r * p + i] += gs[i * q..(i + 1) * q]
                            .iter()
                            .zip(br)
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for r in 0..rows {
                    let gs = &g[(r / seg) * p * q..(r / seg + 1) * p * q];
                    let ar = &av[r * p..(r + 1) * p];
                    for i in 0..p {
                        for j in 0..q {
                            db[r * q + j] += gs[i * q + j] * ar[i];
                        }
                    }
                }
            }
        }
        Op::LinearAttention {
            fq,
            fk,
            v,
            s0,
            z0,
            segments,
            norm,
        } => {
            let shape = LinearAttentionShape {
                segments,
                dk: nodes[*fq].value.cols(),
                dv: nodes[*v].value.cols(),
                norm: *norm,
            };
            let lg = linear_attention_backward(
                &shape,
                val(*fq),
                val(*fk),
                val(*v),
                s0.map(val),
                z0.map(val),
                out,
                g,
            );
            if let Some(d) = acc(grads, nodes, *fq) {
                add_into(d, lg.fq);
            }
            if let Some(d) = acc(grads, nodes, *fk) {
                add_into(d, lg.fk);
            }
            if let Some(d) = acc(grads, nodes, *v) {
                add_into(d, lg.v);
            }
            if let Some(s0) = s0 {
                if let Some(d) = acc(grads, nodes, *s0) {
                    add_into(d, lg.s0);
                }
            }
            if let Some(z0) = z0 {
                if let Some(d) = acc(grads, nodes, *z0) {
                    add_into(d, lg.z0);
                }
            }
        }
        Op::SoftmaxAttention {
            q,
            k,
            v,
            segments,
            scale,
            probs,
        } => {
            let d = nodes[*q].value.cols();
            let sg = softmax_attention_backward(
                segments,
                d,
                *scale,
                val(*q),
                val(*k),
                val(*v),
                probs,
                g,
            );
            if let Some(dq) = acc(grads, nodes, *q) {
                add_into(dq, sg.q);
            }
            if let Some(dk) = acc(grads, nodes, *k) {
                add_into(dk, sg.k);
            }
            if let Some(dv) = acc(grads, nodes, *v) {
                add_into(dv, sg.v);
            }
        }
        Op::Bce { logits, labels, eps } => {
            let xv = val(*logits);
            if let Some(dx) = acc(grads, nodes, *logits) {
                for i in 0..xv.len() {
                    let s = sigmoid(xv[i]);
                    if s > *eps && s < 1.0 - eps {
                        dx[i] += g[0] * (s - labels[i]);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `ELU(x) + 1`, strictly positive for finite `x`.
pub fn phi(x: f64) -> f64 {
    elu(x) + 1.0
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let data = x.data().iter().map(|&v| f(v)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.push(name, out, op(self.id), &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.tape.check_same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            let data = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            } else if b.len() == 1 && b.ndim() <= 1 {
                let y = b.item();
                a.data().iter().map(|&x| f(x, y)).collect()
            } else {
                return Err(shape_err(name, &a, &b));
            };
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(name, out, op, &[self.id, other.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
                return Err(shape_err("matmul", &a, &b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut c = vec![0.0; m * n];
            gemm_strided(a.data(), (k, 1), b.data(), (n, 1), &mut c, m, k, n, 0.0);
            Tensor::matrix(m, n, c)?
        };
        self.tape
            .push("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.ndim() != 2 {
                return Err(Error::dim("transpose", format!("{:?}", x.shape())));
            }
            let (r, c) = (x.rows(), x.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, data)?
        };
        self.tape.push("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", |v| v * c, |x| Op::MulScalar(x, c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn elu(self) -> Result<Var<'t>> {
        self.unary("elu", elu, Op::Elu)
    }

    /// Kernel feature map `ELU(x) + 1`.
    pub fn phi(self) -> Result<Var<'t>> {
        self.unary("phi", phi, Op::Phi)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu)
    }

    /// Softmax over the last axis (each row of a matrix).
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.push("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push("sum", out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    /// Column sums of a matrix: `[r, c] -> [c]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let c = x.cols();
            let mut data = vec![0.0; c];
            for row in x.data().chunks(c) {
                add_into(&mut data, row.iter().copied());
            }
            Tensor::vector(data)
        };
        self.tape.push("sum_rows", out, Op::SumRows(self.id), &[self.id])
    }

    /// Sums consecutive groups of `seg` rows: `[n·seg, c] -> [n, c]`.
    pub fn segment_sum(self, seg: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.ndim() != 2 || seg == 0 || x.rows() % seg != 0 {
                return Err(Error::dim("segment_sum", format!("{:?} by {seg}", x.shape())));
            }
            let c = x.cols();
            let n = x.rows() / seg;
            let mut data = vec![0.0; n * c];
            for (r, row) in x.data().chunks(c).enumerate() {
                add_into(&mut data[(r / seg) * c..(r / seg + 1) * c], row.iter().copied());
            }
            Tensor::matrix(n, c, data)?
        };
        self.tape
            .push("segment_sum", out, Op::SegmentSum(self.id, seg), &[self.id])
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` matrix.
    pub fn add_rowwise(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.rowwise(bias, "add_rowwise", |a, b| a + b, Op::AddRowwise(self.id, bias.id))
    }

    /// Scales every row of an `[r, c]` matrix elementwise by a length-`c` vector.
    pub fn mul_rowwise(self, scale: Var<'t>) -> Result<Var<'t>> {
        self.rowwise(scale, "mul_rowwise", |a, b| a * b, Op::MulRowwise(self.id, scale.id))
    }

    fn rowwise(
        self,
        vec: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.tape.check_same_tape(vec);
        let out = {
            let (x, b) = (self.value(), vec.value());
            if x.ndim() != 2 || b.ndim() != 1 || b.len() != x.cols() {
                return Err(shape_err(name, &x, &b));
            }
            let c = x.cols();
            let bd = b.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, bd[i % c]))
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.push(name, out, op, &[self.id, vec.id])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let c = x.cols();
            if x.ndim() != 2 || gv.len() != c || bv.len() != c {
                return Err(shape_err("layer_norm", &x, &gv));
            }
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = Vec::with_capacity(x.rows());
            let mut out = vec![0.0; x.len()];
            for (r, row) in x.data().chunks(c).enumerate() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..c {
                    let xh = (row[j] - mean) * inv;
                    xhat[r * c + j] = xh;
                    out[r * c + j] = xh * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        )
    }

    /// Selects rows by index (embedding lookup).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (r, c) = (x.rows(), x.cols());
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(Error::Index { index: i, len: r });
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::matrix(idx.len(), c, data)?
        };
        self.tape.push(
            "gather_rows",
            out,
            Op::GatherRows {
                src: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if start + len > x.rows() {
                return Err(Error::Index {
                    index: start + len,
                    len: x.rows(),
                });
            }
            let c = x.cols();
            Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?
        };
        self.tape.push(
            "slice_rows",
            out,
            Op::SliceRows {
                src: self.id,
                start,
            },
            &[self.id],
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn norm(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().norm());
        self.tape.push("norm", out, Op::Norm(self.id), &[self.id])
    }

    /// Euclidean norm of each row: `[r, c] -> [r]`.
    pub fn row_norm(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let c = x.cols();
            Tensor::vector(
                x.data()
                    .chunks(c)
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect(),
            )
        };
        self.tape.push("row_norm", out, Op::RowNorm(self.id), &[self.id])
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.len() != b.len() {
                return Err(shape_err("dot", &a, &b));
            }
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        };
        self.tape
            .push("dot", out, Op::Dot(self.id, other.id), &[self.id, other.id])
    }

    /// Per-row inner products of two equally shaped matrices: `[r, c] -> [r]`.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() || a.ndim() != 2 {
                return Err(shape_err("row_dot", &a, &b));
            }
            let c = a.cols();
            Tensor::vector(
                a.data()
                    .chunks(c)
                    .zip(b.data().chunks(c))
                    .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
                    .collect(),
            )
        };
        self.tape
            .push("row_dot", out, Op::RowDot(self.id, other.id), &[self.id, other.id])
    }

    /// For consecutive groups of `seg` rows, sums the outer products
    /// `a_rowᵀ ⊗ b_row`: `[n·seg, p] × [n·seg, q] -> [n, p·q]`.
    pub fn segment_outer_sum(self, other: Var<'t>, seg: usize) -> Result<Var<'t>> {
        self.tape.check_same_tape(other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows() || seg == 0 || a.rows() % seg != 0 {
                return Err(shape_err("segment_outer_sum", &a, &b));
            }
            let (p, q) = (a.cols(), b.cols());
            let n = a.rows() / seg;
            let mut data = vec![0.0; n * p * q];
            for r in 0..a.rows() {
                let (ar, br) = (a.row(r), b.row(r));
                let dst = &mut data[(r / seg) * p * q..(r / seg + 1) * p * q];
                for i in 0..p {
                    for j in 0..q {
                        dst[i * q + j] += ar[i] * br[j];
                    }
                }
            }
            Tensor::matrix(n, p * q, data)?
        };
        self.tape.push(
            "segment_outer_sum",
            out,
            Op::SegmentOuterSum {
                a: self.id,
                b: other.id,
                seg,
            },
            &[self.id, other.id],
        )
    }

    /// Binary cross-entropy of logits against 0/1 labels, summed. The
    /// sigmoid is clamped to `[eps, 1 - eps]` before the logarithm.
    pub fn bce_with_logits(self, labels: &[f64], eps: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.len() != labels.len() {
                return Err(Error::dim(
                    "bce_with_logits",
                    format!("{} logits vs {} labels", x.len(), labels.len()),
                ));
            }
            let loss: f64 = x
                .data()
                .iter()
                .zip(labels)
                .map(|(&l, &y)| {
                    let s = sigmoid(l).clamp(eps, 1.0 - eps);
                    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
                })
                .sum();
            Tensor::scalar(loss)
        };
        self.tape.push(
            "bce_with_logits",
            out,
            Op::Bce {
                logits: self.id,
                labels: labels.to_vec(),
                eps,
            },
            &[self.id],
        )
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let tape = parts
        .first()
        .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?
        .tape;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        if vals.iter().any(|v| v.ndim() != 2 || v.rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::matrix(rows, total, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push("concat_cols", out, Op::ConcatCols(ids.clone()), &ids)
}

/// Causal kernelized attention over stacked sequences. `fq`, `fk` are
/// feature-mapped (positive) queries and keys, `segments` the row offsets
/// of each sequence, `s0`/`z0` optional per-sequence memory seeds of shape
/// `[B, dk·dv]` and `[B, dk]`.
pub fn linear_attention<'t>(
    fq: Var<'t>,
    fk: Var<'t>,
    v: Var<'t>,
    s0: Option<Var<'t>>,
    z0: Option<Var<'t>>,
    segments: &[usize],
    norm: Normalization,
) -> Result<Var<'t>> {
    let tape = fq.tape;
    let out = {
        let (q, k, vv) = (fq.value(), fk.value(), v.value());
        let (dk, dv) = (q.cols(), vv.cols());
        let total = *segments.last().unwrap_or(&0);
        if q.shape() != k.shape() || q.rows() != total || vv.rows() != total {
            return Err(shape_err("linear_attention", &q, &vv));
        }
        let n_seg = segments.len().saturating_sub(1);
        let s0v = s0.map(|s| s.value());
        let z0v = z0.map(|z| z.value());
        if let Some(s) = &s0v {
            if s.len() != n_seg * dk * dv {
                return Err(shape_err("linear_attention(s0)", s, &q));
            }
        }
        if let Some(z) = &z0v {
            if z.len() != n_seg * dk {
                return Err(shape_err("linear_attention(z0)", z, &q));
            }
        }
        let shape = LinearAttentionShape {
            segments,
            dk,
            dv,
            norm,
        };
        let data = linear_attention_forward(
            &shape,
            q.data(),
            k.data(),
            vv.data(),
            s0v.as_ref().map(|s| s.data()),
            z0v.as_ref().map(|z| z.data()),
        )?;
        Tensor::matrix(total, dv, data)?
    };
    let mut inputs = vec![fq.id, fk.id, v.id];
    inputs.extend(s0.map(|s| s.id));
    inputs.extend(z0.map(|z| z.id));
    tape.push(
        "linear_attention",
        out,
        Op::LinearAttention {
            fq: fq.id,
            fk: fk.id,
            v: v.id,
            s0: s0.map(|s| s.id),
            z0: z0.map(|z| z.id),
            segments: segments.to_vec(),
            norm,
        },
        &inputs,
    )
}

/// Causal softmax attention `softmax(q kᵀ · scale) v` over stacked sequences.
pub fn softmax_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    segments: &[usize],
    scale: f64,
) -> Result<Var<'t>> {
    let tape = q.tape;
    let needs_grad = tape.grad_enabled
        && [q, k, v].iter().any(|x| x.requires_grad());
    let (out, probs) = {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let total = *segments.last().unwrap_or(&0);
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != total {
            return Err(shape_err("softmax_attention", &qv, &vv));
        }
        let d = qv.cols();
        let (data, probs) =
            softmax_attention_forward(segments, d, scale, qv.data(), kv.data(), vv.data(), needs_grad);
        (Tensor::matrix(total, d, data)?, probs)
    };
    tape.push(
        "softmax_attention",
        out,
        Op::SoftmaxAttention {
            q: q.id,
            k: k.id,
            v: v.id,
            segments: segments.to_vec(),
            scale,
            probs,
        },
        &[q.id, k.id, v.id],
    )
}

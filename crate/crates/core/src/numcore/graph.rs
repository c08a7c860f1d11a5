//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends one node holding its value and a record of its
//! parents; nodes are created in topological order so `backward` is a single
//! reverse sweep that visits each node once.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::kernels::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    AddColBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        dilation: usize,
    },
    SelectRow(usize, usize),
    Reshape(usize),
    MeanRows(usize),
    Sum(usize),
    MseVelocity(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddColBias(..) => "add_col_bias",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Conv1d { .. } => "dilated_conv1d",
            Op::SelectRow(..) => "select_row",
            Op::Reshape(_) => "reshape",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::MseVelocity(..) => "mse_velocity_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// An append-only computation tape.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<(usize, &'static str)>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(t, Op::Leaf, requires_grad)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.all_finite() {
            self.non_finite.set(Some((id, op.name())));
        }
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Fails if any forward value so far contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            None => Ok(()),
            Some((id, op)) => Err(Error::Numeric {
                param: format!("node {id}"),
                message: format!("non-finite value produced by {op}"),
            }),
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::filled(&out_shape, 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backward_node(&nodes, id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], id: usize) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()))
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if nodes[id].requires_grad {
        f(slot(grads, nodes, id).data_mut());
    }
}

fn backward_node(nodes: &[Node], id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let dyr = MatRef::dense(dy.data(), m, n);
            if needs(a) {
                let g = slot(grads, nodes, a);
                gemm(
                    1.0,
                    dyr,
                    MatRef::dense(bv.data(), k, n).t(),
                    1.0,
                    MatMut::dense(g.data_mut(), m, k),
                );
            }
            if needs(b) {
                let g = slot(grads, nodes, b);
                gemm(
                    1.0,
                    MatRef::dense(av.data(), m, k).t(),
                    dyr,
                    1.0,
                    MatMut::dense(g.data_mut(), k, n),
                );
            }
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            let dyr = MatRef::dense(dy.data(), m, n);
            if needs(a) {
                let g = slot(grads, nodes, a);
                gemm(
                    1.0,
                    dyr,
                    MatRef::dense(bv.data(), n, k),
                    1.0,
                    MatMut::dense(g.data_mut(), m, k),
                );
            }
            if needs(b) {
                let g = slot(grads, nodes, b);
                gemm(
                    1.0,
                    dyr.t(),
                    MatRef::dense(av.data(), m, k),
                    1.0,
                    MatMut::dense(g.data_mut(), n, k),
                );
            }
        }
        Op::Transpose(a) => {
            let t = dy.transpose();
            accumulate(grads, nodes, a, |g| add_into(g, t.data()));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, |g| add_into(g, dy.data()));
            accumulate(grads, nodes, b, |g| add_into(g, dy.data()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |g| add_into(g, dy.data()));
            accumulate(grads, nodes, b, |g| {
                for (gi, d) in g.iter_mut().zip(dy.data()) {
                    *gi -= d;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).clone(), val(b).clone());
            accumulate(grads, nodes, a, |g| {
                for ((gi, d), bi) in g.iter_mut().zip(dy.data()).zip(bv.data()) {
                    *gi += d * bi;
                }
            });
            accumulate(grads, nodes, b, |g| {
                for ((gi, d), ai) in g.iter_mut().zip(dy.data()).zip(av.data()) {
                    *gi += d * ai;
                }
            });
        }
        Op::AddRowBias(x, b) => {
            accumulate(grads, nodes, x, |g| add_into(g, dy.data()));
            let n = dy.cols();
            accumulate(grads, nodes, b, |g| {
                for row in dy.data().chunks(n) {
                    add_into(g, row);
                }
            });
        }
        Op::AddColBias(x, b) => {
            accumulate(grads, nodes, x, |g| add_into(g, dy.data()));
            let n = dy.cols();
            accumulate(grads, nodes, b, |g| {
                for (gi, row) in g.iter_mut().zip(dy.data().chunks(n)) {
                    *gi += row.iter().sum::<f64>();
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, a, |g| {
                for (gi, d) in g.iter_mut().zip(dy.data()) {
                    *gi += s * d;
                }
            });
        }
        Op::Relu(a) => {
            accumulate(grads, nodes, a, |g| {
                for ((gi, d), yi) in g.iter_mut().zip(dy.data()).zip(y.data()) {
                    if *yi > 0.0 {
                        *gi += d;
                    }
                }
            });
        }
        Op::Tanh(a) => {
            accumulate(grads, nodes, a, |g| {
                for ((gi, d), yi) in g.iter_mut().zip(dy.data()).zip(y.data()) {
                    *gi += d * (1.0 - yi * yi);
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let n = y.cols();
            accumulate(grads, nodes, a, |g| {
                for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.data().chunks(n)).zip(y.data().chunks(n)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for ((gi, d), yi) in gr.iter_mut().zip(dr).zip(yr) {
                        *gi += yi * (d - dot);
                    }
                }
            });
        }
        Op::LayerNormRows {
            x,
            gamma,
            beta,
            ref xhat,
            ref rstd,
        } => {
            let n = y.cols();
            let gv = val(gamma).clone();
            accumulate(grads, nodes, gamma, |g| {
                for (dr, xr) in dy.data().chunks(n).zip(xhat.chunks(n)) {
                    for ((gi, d), xh) in g.iter_mut().zip(dr).zip(xr) {
                        *gi += d * xh;
                    }
                }
            });
            accumulate(grads, nodes, beta, |g| {
                for dr in dy.data().chunks(n) {
                    add_into(g, dr);
                }
            });
            accumulate(grads, nodes, x, |g| {
                let nf = n as f64;
                for (((gr, dr), xr), rs) in g
                    .chunks_mut(n)
                    .zip(dy.data().chunks(n))
                    .zip(xhat.chunks(n))
                    .zip(rstd.iter())
                {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let dxh = dr[j] * gv.data()[j];
                        sum_d += dxh;
                        sum_dx += dxh * xr[j];
                    }
                    for j in 0..n {
                        let dxh = dr[j] * gv.data()[j];
                        gr[j] += rs / nf * (nf * dxh - sum_d - xr[j] * sum_dx);
                    }
                }
            });
        }
        Op::Conv1d { x, w, dilation } => {
            let (xv, wv) = (val(x), val(w));
            conv1d_backward(xv, wv, dilation, dy, needs(x), needs(w), grads, nodes, x, w);
        }
        Op::SelectRow(table, idx) => {
            let n = dy.len();
            accumulate(grads, nodes, table, |g| {
                add_into(&mut g[idx * n..(idx + 1) * n], dy.data())
            });
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, a, |g| add_into(g, dy.data()));
        }
        Op::MeanRows(a) => {
            let m = val(a).rows();
            let n = dy.len();
            accumulate(grads, nodes, a, |g| {
                for gr in g.chunks_mut(n) {
                    for (gi, d) in gr.iter_mut().zip(dy.data()) {
                        *gi += d / m as f64;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let d = dy.data()[0];
            accumulate(grads, nodes, a, |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }
        Op::MseVelocity(p, t) => {
            let scale = dy.data()[0];
            let grad = mse_velocity_grad(val(p), val(t));
            accumulate(grads, nodes, p, |g| {
                for (gi, d) in g.iter_mut().zip(grad.iter()) {
                    *gi += scale * d;
                }
            });
            accumulate(grads, nodes, t, |g| {
                for (gi, d) in g.iter_mut().zip(grad.iter()) {
                    *gi -= scale * d;
                }
            });
        }
        Op::CrossEntropy { logits, ref labels } => {
            let scale = dy.data()[0];
            let lv = val(logits);
            let m = lv.cols();
            let n = lv.rows() as f64;
            accumulate(grads, nodes, logits, |g| {
                for ((gr, zr), &label) in g.chunks_mut(m).zip(lv.data().chunks(m)).zip(labels) {
                    let p = softmax(zr);
                    for (j, (gi, pj)) in gr.iter_mut().zip(p).enumerate() {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        *gi += scale * (pj - onehot) / n;
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of the position+velocity loss with respect to `pred`.
pub(crate) fn mse_velocity_grad(pred: &Tensor, target: &Tensor) -> Vec<f64> {
    let (t, r) = (pred.rows(), pred.cols());
    let p = pred.data();
    let y = target.data();
    let pos_scale = 2.0 / (t * r) as f64;
    let vel_scale = 2.0 / ((t - 1) * r) as f64;
    let mut g: Vec<f64> = p.iter().zip(y).map(|(a, b)| pos_scale * (a - b)).collect();
    for f in 0..t - 1 {
        for c in 0..r {
            let e = (p[(f + 1) * r + c] - p[f * r + c]) - (y[(f + 1) * r + c] - y[f * r + c]);
            g[(f + 1) * r + c] += vel_scale * e;
            g[f * r + c] -= vel_scale * e;
        }
    }
    g
}

/// The `[t0, t1)` output range where tap offset `shift` reads inside the input.
pub(crate) fn tap_range(len: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
    (t0.min(t1), t1)
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    xv: &Tensor,
    wv: &Tensor,
    dilation: usize,
    dy: &Tensor,
    need_x: bool,
    need_w: bool,
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    x: usize,
    w: usize,
) {
    let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
    let len = xv.cols();
    let center = (k / 2) as isize;
    for j in 0..k {
        let shift = (j as isize - center) * dilation as isize;
        let (t0, t1) = tap_range(len, shift);
        if t0 >= t1 {
            continue;
        }
        let s0 = (t0 as isize + shift) as usize;
        let s1 = (t1 as isize + shift) as usize;
        let w_tap = MatRef {
            data: wv.data(),
            offset: j,
            rows: c_out,
            cols: c_in,
            row_stride: c_in * k,
            col_stride: k,
        };
        let dy_blk = MatRef::dense(dy.data(), c_out, len).cols(t0, t1);
        if need_x {
            let g = slot(grads, nodes, x);
            let dst = MatMut::dense(g.data_mut(), c_in, len).cols(s0, s1);
            gemm(1.0, w_tap.t(), dy_blk, 1.0, dst);
        }
        if need_w {
            let g = slot(grads, nodes, w);
            let dst = MatMut {
                data: g.data_mut(),
                offset: j,
                rows: c_out,
                cols: c_in,
                row_stride: c_in * k,
                col_stride: k,
            };
            let x_blk = MatRef::dense(xv.data(), c_in, len).cols(s0, s1);
            gemm(1.0, dy_blk, x_blk.t(), 1.0, dst);
        }
    }
}

impl Graph {
    /// Leaf sharing storage with an existing tensor.
    pub fn leaf_shared(&self, t: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var { graph: self, id }
    }
}

//! Differentiable operators.

use super::graph::{softmax, tap_range, Graph, Op, Var};
use super::kernels::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err<T>(op: &str, detail: String) -> Result<T> {
    Err(Error::Shape(format!("{op}: {detail}")))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> std::sync::Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    /// `self (m×k) · other (k×n)`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.rows() {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let out = super::kernels::matmul(a.data(), b.data(), a.rows(), a.cols(), b.cols());
        let t = Tensor::from_rows(a.rows(), b.cols(), out)?;
        Ok(self.graph.push(t, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self (m×k) · otherᵀ` where `other` is `n×k`.
    pub fn matmul_nt(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.cols() {
            return shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::dense(a.data(), m, k),
            MatRef::dense(b.data(), n, k).t(),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        let t = Tensor::from_rows(m, n, out)?;
        Ok(self
            .graph
            .push(t, Op::MatMulNt(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Var<'g> {
        let t = self.value().transpose();
        self.graph.push(t, Op::Transpose(self.id), &[self.id])
    }

    fn zip_with(self, other: Var<'g>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.graph.push(t, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.graph.push(t, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.graph.push(t, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a `1×n` row vector to every row.
    pub fn add_row_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias);
        let (x, b) = (self.value(), bias.value());
        if b.len() != x.cols() {
            return shape_err("add_row_bias", format!("{:?} + {:?}", x.shape(), b.shape()));
        }
        let mut t = (*x).clone();
        let n = x.cols();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bi) in row.iter_mut().zip(b.data()) {
                *v += bi;
            }
        }
        Ok(self
            .graph
            .push(t, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Adds an `m×1` column vector to every column.
    pub fn add_col_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias);
        let (x, b) = (self.value(), bias.value());
        if b.len() != x.rows() {
            return shape_err("add_col_bias", format!("{:?} + {:?}", x.shape(), b.shape()));
        }
        let mut t = (*x).clone();
        let n = x.cols();
        for (row, bi) in t.data_mut().chunks_mut(n).zip(b.data()) {
            for v in row.iter_mut() {
                *v += bi;
            }
        }
        Ok(self
            .graph
            .push(t, Op::AddColBias(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let t = self.value().map(|v| v * s);
        self.graph.push(t, Op::Scale(self.id, s), &[self.id])
    }

    pub fn relu(self) -> Var<'g> {
        let t = self.value().map(|v| v.max(0.0));
        self.graph.push(t, Op::Relu(self.id), &[self.id])
    }

    pub fn tanh(self) -> Var<'g> {
        let t = self.value().map(f64::tanh);
        self.graph.push(t, Op::Tanh(self.id), &[self.id])
    }

    pub fn softmax_rows(self) -> Var<'g> {
        let x = self.value();
        let n = x.cols();
        let data: Vec<f64> = x.data().chunks(n).flat_map(softmax).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.graph.push(t, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Per-row standardisation followed by a `1×n` gain and offset.
    pub fn layer_norm_rows(self, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let n = x.cols();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != n || bv.len() != n {
            return shape_err(
                "layer_norm_rows",
                format!("{:?} with gain {:?}, offset {:?}", x.shape(), gv.shape(), bv.shape()),
            );
        }
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::LayerNormRows {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.graph.push(t, op, &[self.id, gamma.id, beta.id]))
    }

    /// Same-length dilated convolution of a `C_in×T` signal with a
    /// `C_out×C_in×k` kernel (odd `k`, zero padding).
    pub fn dilated_conv1d(self, kernel: Var<'g>, dilation: usize) -> Result<Var<'g>> {
        self.same_graph(&kernel);
        let (x, w) = (self.value(), kernel.value());
        if w.shape().len() != 3 {
            return shape_err("dilated_conv1d", format!("kernel must be rank 3, got {:?}", w.shape()));
        }
        let (c_in, k) = (w.shape()[1], w.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("dilated_conv1d: kernel size {k} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilated_conv1d: dilation must be ≥ 1".into()));
        }
        if x.rows() != c_in {
            return shape_err(
                "dilated_conv1d",
                format!("input {:?} vs kernel {:?}", x.shape(), w.shape()),
            );
        }
        let t = conv1d_forward(&x, &w, dilation);
        let op = Op::Conv1d {
            x: self.id,
            w: kernel.id,
            dilation,
        };
        Ok(self.graph.push(t, op, &[self.id, kernel.id]))
    }

    /// Row `index` of a table, as `1×n`.
    pub fn select_row(self, index: usize) -> Result<Var<'g>> {
        let t = self.value();
        if index >= t.rows() {
            return Err(Error::Index(format!("row {index} of {:?}", t.shape())));
        }
        let row = Tensor::from_rows(1, t.cols(), t.row(index).to_vec())?;
        Ok(self.graph.push(row, Op::SelectRow(self.id, index), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshaped(shape.to_vec())?;
        Ok(self.graph.push(t, Op::Reshape(self.id), &[self.id]))
    }

    /// Mean over rows, `m×n → 1×n`.
    pub fn mean_rows(self) -> Var<'g> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let t = Tensor::from_rows(1, n, out).expect("row shape");
        self.graph.push(t, Op::MeanRows(self.id), &[self.id])
    }

    pub fn sum(self) -> Var<'g> {
        let t = Tensor::scalar(self.value().sum());
        self.graph.push(t, Op::Sum(self.id), &[self.id])
    }

    /// Scalar value of a `1×1` node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }
}

/// Scaled dot-product attention over `n` tokens.
///
/// Returns the attended values and the pre-softmax scores `QKᵀ/√d`.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (qs, ks, vs) = (q.value(), k.value(), v.value());
    if qs.shape() != ks.shape() || qs.rows() != vs.rows() || qs.cols() == 0 {
        return shape_err(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", qs.shape(), ks.shape(), vs.shape()),
        );
    }
    let d = qs.cols() as f64;
    let scores = q.matmul_nt(k)?.scale(1.0 / d.sqrt());
    let weights = scores.softmax_rows();
    let out = weights.matmul(v)?;
    Ok((out, scores))
}

/// Mean squared error over all entries plus mean squared error of
/// adjacent-frame differences. Frames run along rows (`T×R`).
pub fn mse_velocity_loss<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    pred.same_graph(&target);
    let (p, y) = (pred.value(), target.value());
    let (pos, vel) = mse_velocity_terms(&p, &y)?;
    let g = pred.graph;
    Ok(g.push(
        Tensor::scalar(pos + vel),
        Op::MseVelocity(pred.id, target.id),
        &[pred.id, target.id],
    ))
}

/// The position and velocity terms of [`mse_velocity_loss`], separately.
pub fn mse_velocity_terms(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return shape_err(
            "mse_velocity_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        );
    }
    let (t, r) = (pred.rows(), pred.cols());
    if t < 2 {
        return Err(Error::Size(format!("mse_velocity_loss needs ≥ 2 frames, got {t}")));
    }
    let p = pred.data();
    let y = target.data();
    let pos = p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (t * r) as f64;
    let mut vel = 0.0;
    for f in 0..t - 1 {
        for c in 0..r {
            let e = (p[(f + 1) * r + c] - p[f * r + c]) - (y[(f + 1) * r + c] - y[f * r + c]);
            vel += e * e;
        }
    }
    vel /= ((t - 1) * r) as f64;
    Ok((pos, vel))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (`N×M`).
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let z = logits.value();
    let (n, m) = (z.rows(), z.cols());
    if m < 2 {
        return Err(Error::Size(format!("cross_entropy needs ≥ 2 classes, got {m}")));
    }
    if labels.len() != n {
        return shape_err("cross_entropy", format!("{n} rows but {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Index(format!("label {bad} out of range for {m} classes")));
    }
    let mut total = 0.0;
    for (row, &label) in z.data().chunks(m).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    let g = logits.graph;
    Ok(g.push(
        Tensor::scalar(total / n as f64),
        Op::CrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
        },
        &[logits.id],
    ))
}

pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, dilation: usize) -> Tensor {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let len = x.cols();
    let center = (k / 2) as isize;
    let mut out = vec![0.0; c_out * len];
    for j in 0..k {
        let shift = (j as isize - center) * dilation as isize;
        let (t0, t1) = tap_range(len, shift);
        if t0 >= t1 {
            continue;
        }
        let s0 = (t0 as isize + shift) as usize;
        let s1 = (t1 as isize + shift) as usize;
        let w_tap = MatRef {
            data: w.data(),
            offset: j,
            rows: c_out,
            cols: c_in,
            row_stride: c_in * k,
            col_stride: k,
        };
        let x_blk = MatRef::dense(x.data(), c_in, len).cols(s0, s1);
        let dst = MatMut::dense(&mut out, c_out, len).cols(t0, t1);
        gemm(1.0, w_tap, x_blk, 1.0, dst);
    }
    Tensor::from_rows(c_out, len, out).expect("conv output shape")
}

//! Recorded computation with reverse-mode adjoints.
//!
//! A [`Graph`] appends one node per primitive, so node order is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const KL_EPS: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Scale/shift and running statistics of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics observed in train mode, applied to the running
/// statistics once the graph is released.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub ids: BatchNormIds,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

impl RunningStatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let blend = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (1.0 - BN_MOMENTUM) * *d + BN_MOMENTUM * s;
            }
        };
        blend(
            store.get_mut(self.ids.running_mean).value.data_mut(),
            &self.mean,
        );
        blend(store.get_mut(self.ids.running_var).value.data_mut(), &self.var);
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Softmax(Var, f64),
    Kl { target: Var, pred: Var, eps: f64 },
    SquaredL2(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    RowWeightedSum(Var, Var),
    Dropout(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward computation over parameters borrowed from a [`ParamStore`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    stat_updates: Vec<RunningStatUpdate>,
}

fn rank_le1(t: &Tensor) -> bool {
    t.shape().len() <= 1
}

fn row_shape(template: &Tensor, rows: usize, cols: usize) -> Vec<usize> {
    if rank_le1(template) {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

fn per_row_shape(template: &Tensor) -> Vec<usize> {
    if rank_le1(template) {
        Vec::new()
    } else {
        vec![template.rows()]
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            stat_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
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

    pub fn running_stat_updates(&self) -> &[RunningStatUpdate] {
        &self.stat_updates
    }

    pub fn into_running_stat_updates(self) -> Vec<RunningStatUpdate> {
        self.stat_updates
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant or differentiable input.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Node reading a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn check_matmul(&self, op: &'static str, x: Var, w: Var) -> Result<(usize, usize, usize)> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 || xt.cols() != wt.shape()[0] {
            return Err(Error::dim(op, xt.shape(), wt.shape()));
        }
        Ok((xt.rows(), wt.shape()[0], wt.shape()[1]))
    }

    fn matmul_value(&self, x: Var, w: Var, m: usize, p: usize, q: usize) -> Tensor {
        let mut out = vec![0.0; m * q];
        gemm(
            m,
            p,
            q,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            0.0,
            &mut out,
        );
        Tensor::new(row_shape(self.value(x), m, q), out).expect("matmul shape")
    }

    /// `x · W` without bias.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, p, q) = self.check_matmul("matmul", x, w)?;
        let out = self.matmul_value(x, w, m, p, q);
        Ok(self.push(out, Op::MatMul(x, w), &[x, w]))
    }

    /// `x · W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, p, q) = self.check_matmul("affine", x, w)?;
        if self.value(b).len() != q {
            return Err(Error::dim("affine bias", self.shape(w), self.shape(b)));
        }
        let mut out = self.matmul_value(x, w, m, p, q);
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(q) {
            for (o, bj) in row.iter_mut().zip(bias) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::Affine(x, w, b), &[x, w, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let cols = xt.cols();
        if self.value(b).len() != cols {
            return Err(Error::dim("add_row", xt.shape(), self.shape(b)));
        }
        let mut out = xt.clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, bj) in row.iter_mut().zip(bias) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let mut out = self.value(x).clone();
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(out, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Row-wise `softmax((z - max z) / tau)`.
    pub fn softmax_with_temperature(&mut self, z: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let mut out = self.value(z).clone();
        let cols = out.cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                softmax_row(row, tau);
            }
        }
        Ok(self.push(out, Op::Softmax(z, tau), &[z]))
    }

    /// Row-wise `Σ_i t_i·ln(t_i / max(p_i, eps))`; zero-mass target terms vanish.
    pub fn kl_divergence(&mut self, target: Var, pred: Var, eps: f64) -> Result<Var> {
        self.binary_same_shape("kl_divergence", target, pred)?;
        let (t, p) = (self.value(target), self.value(pred));
        let cols = t.cols();
        validate_distributions("kl target", t)?;
        validate_distributions("kl prediction", p)?;
        let out: Vec<f64> = t
            .data()
            .chunks(cols.max(1))
            .zip(p.data().chunks(cols.max(1)))
            .map(|(tr, pr)| {
                tr.iter()
                    .zip(pr)
                    .filter(|(ti, _)| **ti > 0.0)
                    .map(|(ti, pi)| ti * (ti.ln() - pi.max(eps).ln()))
                    .sum()
            })
            .collect();
        let out = Tensor::new(per_row_shape(t), out)?;
        Ok(self.push(out, Op::Kl { target, pred, eps }, &[target, pred]))
    }

    /// Row-wise `Σ_i (a_i - b_i)²`.
    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("squared_l2", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let cols = at.cols().max(1);
        let out: Vec<f64> = at
            .data()
            .chunks(cols)
            .zip(bt.data().chunks(cols))
            .map(|(ar, br)| ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let out = Tensor::new(per_row_shape(at), out)?;
        Ok(self.push(out, Op::SquaredL2(a, b), &[a, b]))
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        for v in parts {
            if self.value(*v).rows() != rows {
                return Err(Error::dim("concat", self.shape(first), self.shape(*v)));
            }
        }
        let total: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in parts {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let out = Tensor::new(row_shape(self.value(first), rows, total), out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = (xt.rows(), xt.cols());
        if start + len > cols {
            return Err(Error::dim("slice_cols", xt.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let out = Tensor::new(row_shape(xt, rows, len), out)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn check_memory(&self, op: &'static str, mem: Var, rows: usize) -> Result<(usize, usize)> {
        let s = self.shape(mem);
        if s.len() != 3 || s[0] != rows {
            return Err(Error::dim(op, s, &[rows]));
        }
        Ok((s[1], s[2]))
    }

    /// `out[b, i] = mem[b, i, :] · u[b, :]` for a per-row memory `[b, n, e]`.
    pub fn row_dot(&mut self, mem: Var, u: Var) -> Result<Var> {
        let b = self.value(u).rows();
        let (n, e) = self.check_memory("row_dot", mem, b)?;
        if self.value(u).cols() != e {
            return Err(Error::dim("row_dot", self.shape(mem), self.shape(u)));
        }
        let (mt, ut) = (self.value(mem).data(), self.value(u).data());
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            let ur = &ut[r * e..(r + 1) * e];
            for i in 0..n {
                let mr = &mt[(r * n + i) * e..(r * n + i + 1) * e];
                out[r * n + i] = dot(mr, ur);
            }
        }
        let out = Tensor::new(vec![b, n], out)?;
        Ok(self.push(out, Op::RowDot(mem, u), &[mem, u]))
    }

    /// `out[b, :] = Σ_i w[b, i] · values[b, i, :]`.
    pub fn row_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let b = self.value(weights).rows();
        let (n, e) = self.check_memory("row_weighted_sum", values, b)?;
        if self.value(weights).cols() != n {
            return Err(Error::dim(
                "row_weighted_sum",
                self.shape(weights),
                self.shape(values),
            ));
        }
        let (wt, vt) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![0.0; b * e];
        for r in 0..b {
            let o = &mut out[r * e..(r + 1) * e];
            for i in 0..n {
                let w = wt[r * n + i];
                for (oj, vj) in o.iter_mut().zip(&vt[(r * n + i) * e..(r * n + i + 1) * e]) {
                    *oj += w * vj;
                }
            }
        }
        let out = Tensor::new(vec![b, e], out)?;
        Ok(self.push(out, Op::RowWeightedSum(weights, values), &[weights, values]))
    }

    /// Inverted dropout: train mode zeroes each entry with probability `rate`
    /// and scales survivors by `1/(1-rate)`; eval mode is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout(x, mask), &[x]))
    }

    /// Per-column batch normalization of `x` (rows = batch).
    pub fn batch_norm(&mut self, x: Var, ids: BatchNormIds, mode: Mode) -> Result<Var> {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        let xt = self.value(x);
        let (m, q) = (xt.rows(), xt.cols());
        if self.value(gamma).len() != q || self.value(beta).len() != q {
            return Err(Error::dim("batch_norm", xt.shape(), self.shape(gamma)));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::BatchSize(m));
                }
                let mut mean = vec![0.0; q];
                for row in xt.data().chunks(q) {
                    for (a, v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut var = vec![0.0; q];
                for row in xt.data().chunks(q) {
                    for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                let unbiased = var.iter().map(|s| s / (m - 1) as f64).collect();
                var.iter_mut().for_each(|a| *a /= m as f64);
                self.stat_updates.push(RunningStatUpdate {
                    ids,
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var)
            }
            Mode::Eval => (
                self.store.value(ids.running_mean).data().to_vec(),
                self.store.value(ids.running_var).data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xt = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(m * q);
        let mut out = Vec::with_capacity(m * q);
        for row in xt.data().chunks(q.max(1)) {
            for j in 0..q {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Replays adjoints from the scalar `loss` back to every input.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let mut params = vec![None; self.store.len()];
        for (pid, var) in self.param_nodes.iter().enumerate() {
            if let Some(v) = var {
                if self.nodes[v.0].needs_grad {
                    params[pid] = grads[v.0].clone();
                }
            }
        }
        Ok(Backward {
            node_grads: grads,
            params: Gradients { grads: params },
        })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(g);
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(x, w) | Op::Affine(x, w, _) => {
                let (m, p) = (val(*x).rows(), val(*w).shape()[0]);
                let q = val(*w).shape()[1];
                acc(*x, &mut |g| gemm(m, q, p, 1.0, dy, false, val(*w).data(), true, 1.0, g));
                acc(*w, &mut |g| gemm(p, m, q, 1.0, val(*x).data(), true, dy, false, 1.0, g));
                if let Op::Affine(_, _, b) = &node.op {
                    acc(*b, &mut |g| col_sum_into(dy, q, g));
                }
            }
            Op::AddRow(x, b) => {
                let q = val(*x).cols();
                acc(*x, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| col_sum_into(dy, q, g));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |g| {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(val(*b).data()) {
                        *gi += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(val(*a).data()) {
                        *gi += d * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += s * d;
                }
            }),
            Op::Act(x, kind) => {
                let (xin, y) = (val(*x).data(), node.value.data());
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        let dd = match kind {
                            Activation::Relu => {
                                if xin[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - y[i] * y[i],
                            Activation::Sigmoid => y[i] * (1.0 - y[i]),
                        };
                        g[i] += dy[i] * dd;
                    }
                });
            }
            Op::Softmax(z, tau) => {
                let cols = node.value.cols().max(1);
                let p = node.value.data();
                acc(*z, &mut |g| {
                    for ((gr, dr), pr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(p.chunks(cols)) {
                        let s: f64 = dr.iter().zip(pr).map(|(d, pi)| d * pi).sum();
                        for ((gi, d), pi) in gr.iter_mut().zip(dr).zip(pr) {
                            *gi += pi * (d - s) / tau;
                        }
                    }
                });
            }
            Op::Kl { target, pred, eps } => {
                let cols = val(*pred).cols().max(1);
                let (t, p) = (val(*target).data(), val(*pred).data());
                acc(*pred, &mut |g| {
                    for i in 0..g.len() {
                        if t[i] > 0.0 && p[i] > *eps {
                            g[i] -= dy[i / cols] * t[i] / p[i];
                        }
                    }
                });
                acc(*target, &mut |g| {
                    for i in 0..g.len() {
                        if t[i] > 0.0 {
                            g[i] += dy[i / cols] * (t[i].ln() - p[i].max(*eps).ln() + 1.0);
                        }
                    }
                });
            }
            Op::SquaredL2(a, b) => {
                let cols = val(*a).cols().max(1);
                let (x, y) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * (x[i] - y[i]) * dy[i / cols];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= 2.0 * (x[i] - y[i]) * dy[i / cols];
                    }
                });
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for v in parts {
                    let c = val(*v).cols();
                    acc(*v, &mut |g| {
                        for r in 0..rows {
                            add_into(
                                &mut g[r * c..(r + 1) * c],
                                &dy[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = (val(*x).rows(), val(*x).cols());
                let len = node.value.cols();
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        add_into(
                            &mut g[r * cols + start..r * cols + start + len],
                            &dy[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, dy)),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += dy[0])),
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += dy[0] / n));
            }
            Op::RowDot(mem, u) => {
                let s = val(*mem).shape();
                let (b, n, e) = (s[0], s[1], s[2]);
                let (mt, ut) = (val(*mem).data(), val(*u).data());
                acc(*mem, &mut |g| {
                    for r in 0..b {
                        for i in 0..n {
                            let d = dy[r * n + i];
                            let gr = &mut g[(r * n + i) * e..(r * n + i + 1) * e];
                            for (gj, uj) in gr.iter_mut().zip(&ut[r * e..(r + 1) * e]) {
                                *gj += d * uj;
                            }
                        }
                    }
                });
                acc(*u, &mut |g| {
                    for r in 0..b {
                        let gr = &mut g[r * e..(r + 1) * e];
                        for i in 0..n {
                            let d = dy[r * n + i];
                            for (gj, mj) in gr.iter_mut().zip(&mt[(r * n + i) * e..(r * n + i + 1) * e]) {
                                *gj += d * mj;
                            }
                        }
                    }
                });
            }
            Op::RowWeightedSum(w, values) => {
                let s = val(*values).shape();
                let (b, n, e) = (s[0], s[1], s[2]);
                let (wt, vt) = (val(*w).data(), val(*values).data());
                acc(*w, &mut |g| {
                    for r in 0..b {
                        for i in 0..n {
                            g[r * n + i] += dot(&dy[r * e..(r + 1) * e], &vt[(r * n + i) * e..(r * n + i + 1) * e]);
                        }
                    }
                });
                acc(*values, &mut |g| {
                    for r in 0..b {
                        for i in 0..n {
                            let wi = wt[r * n + i];
                            let gr = &mut g[(r * n + i) * e..(r * n + i + 1) * e];
                            for (gj, d) in gr.iter_mut().zip(&dy[r * e..(r + 1) * e]) {
                                *gj += wi * d;
                            }
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |g| {
                for ((gi, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    *gi += d * m;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let q = inv_std.len().max(1);
                let m = val(*x).rows();
                let gv = val(*gamma).data();
                acc(*beta, &mut |g| col_sum_into(dy, q, g));
                acc(*gamma, &mut |g| {
                    for (i, (d, h)) in dy.iter().zip(xhat).enumerate() {
                        g[i % q] += d * h;
                    }
                });
                acc(*x, &mut |g| {
                    if *train {
                        let mut sum_d = vec![0.0; q];
                        let mut sum_dh = vec![0.0; q];
                        for (i, (d, h)) in dy.iter().zip(xhat).enumerate() {
                            let dh = d * gv[i % q];
                            sum_d[i % q] += dh;
                            sum_dh[i % q] += dh * h;
                        }
                        let mf = m as f64;
                        for (i, (d, h)) in dy.iter().zip(xhat).enumerate() {
                            let j = i % q;
                            let dh = d * gv[j];
                            g[i] += inv_std[j] / mf * (mf * dh - sum_d[j] - h * sum_dh[j]);
                        }
                    } else {
                        for (i, d) in dy.iter().enumerate() {
                            g[i] += d * gv[i % q] * inv_std[i % q];
                        }
                    }
                });
            }
        }
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Backward {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Gradients,
}

impl Backward {
    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }

    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn validate_distributions(what: &str, t: &Tensor) -> Result<()> {
    let cols = t.cols().max(1);
    for (r, row) in t.data().chunks(cols).enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "{what} row {r} is not a probability distribution (sum {total})"
            )));
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn col_sum_into(dy: &[f64], cols: usize, g: &mut [f64]) {
    for row in dy.chunks(cols.max(1)) {
        add_into(g, row);
    }
}

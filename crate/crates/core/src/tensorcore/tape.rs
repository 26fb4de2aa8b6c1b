//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the reverse of insertion order is a valid
//! topological order for the backward sweep.

use super::ops::{log_softmax_into, softmax_into};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded operation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to a list of parameters, in the order
/// the parameters were passed to [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
    disconnected: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    /// Positions of parameters the loss does not depend on. Their gradient is
    /// reported as zero.
    pub fn disconnected(&self) -> &[usize] {
        &self.disconnected
    }

    pub fn ensure_connected(&self) -> Result<(), TensorError> {
        if self.disconnected.is_empty() {
            Ok(())
        } else {
            Err(TensorError::DisconnectedParameter(self.disconnected.clone()))
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf that gradients may be requested for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.same_shape(tb) {
            Ok(())
        } else {
            Err(mismatch(name, ta, tb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut value = ta.clone();
        let c = value.cols();
        if c > 0 {
            for row in value.data_mut().chunks_mut(c) {
                for (o, x) in row.iter_mut().zip(tb.data()) {
                    *o += x;
                }
            }
        }
        self.push("add_row", value, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| c * x);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor
    /// is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push("log", value, Op::Log { x: a, floor }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.log_floor(a, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let src = self.value(a);
        let mut value = Tensor::zeros(src.shape());
        let c = src.cols();
        if c > 0 {
            for (s, d) in src.data().chunks(c).zip(value.data_mut().chunks_mut(c)) {
                softmax_into(s, d);
            }
        }
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let src = self.value(a);
        let mut value = Tensor::zeros(src.shape());
        let c = src.cols();
        if c > 0 {
            for (s, d) in src.data().chunks(c).zip(value.data_mut().chunks_mut(c)) {
                log_softmax_into(s, d);
            }
        }
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    /// Elementwise `mu + exp(log_var / 2) * eps`.
    pub fn reparam_sample(&mut self, mu: Var, log_var: Var, eps: Var) -> Result<Var, TensorError> {
        self.same_shape("reparam_sample", mu, log_var)?;
        self.same_shape("reparam_sample", mu, eps)?;
        let half = self.scale(log_var, 0.5)?;
        let sd = self.exp(half)?;
        let noise = self.mul(sd, eps)?;
        self.add(mu, noise)
    }

    /// Per-row diagonal-Gaussian KL to the standard normal, summed over all
    /// rows: `0.5 * sum(exp(log_var) + mu^2 - 1 - log_var)`.
    pub fn gaussian_kl_diag(&mut self, mu: Var, log_var: Var) -> Result<Var, TensorError> {
        self.same_shape("gaussian_kl_diag", mu, log_var)?;
        let var = self.exp(log_var)?;
        let mu2 = self.square(mu)?;
        let a = self.add(var, mu2)?;
        let b = self.sub(a, log_var)?;
        let c = self.add_scalar(b, -1.0)?;
        let total = self.sum(c)?;
        self.scale(total, 0.5)
    }

    /// Reverse sweep from the scalar `loss` to each of `params`.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                left: loss_value.shape().to_vec(),
                right: vec![],
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let mut grads = Vec::with_capacity(params.len());
        let mut disconnected = Vec::new();
        for (i, p) in params.iter().enumerate() {
            match adj.get(p.0).and_then(Option::as_ref) {
                Some(g) => grads.push(g.clone()),
                None => {
                    disconnected.push(i);
                    grads.push(Tensor::zeros(self.value(*p).shape()));
                }
            }
        }
        Ok(Gradients {
            grads,
            disconnected,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul_nt(tb).reshape_like(ta.shape());
                    self.accumulate(adj, a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = ta.matmul_tn(g).reshape_like(tb.shape());
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Transpose(a) => {
                let ga = g.transpose().reshape_like(self.value(a).shape());
                self.accumulate(adj, a, ga);
            }
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(adj, a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let c = g.cols();
                    let mut col_sums = vec![0.0; c];
                    if c > 0 {
                        for row in g.data().chunks(c) {
                            for (s, v) in col_sums.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                    }
                    let shape = self.value(b).shape().to_vec();
                    let gb = Tensor::vector(col_sums).reshape_like(&shape);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, a, g.zip_map(tb, |x, y| x * y));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(adj, b, g.zip_map(ta, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, a, g.map(|v| c * v)),
            Op::AddScalar(a) => self.accumulate(adj, a, g.clone()),
            Op::Exp(a) => self.accumulate(adj, a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log { x, floor } => {
                let ga = g.zip_map(self.value(x), |gv, xv| if xv > floor { gv / xv } else { 0.0 });
                self.accumulate(adj, x, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(adj, a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(a), |gv, xv| 2.0 * xv * gv);
                self.accumulate(adj, a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let mut ga = Tensor::zeros(y.shape());
                if c > 0 {
                    for ((yr, gr), out) in y
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(ga.data_mut().chunks_mut(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(adj, a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                let mut ga = Tensor::zeros(y.shape());
                if c > 0 {
                    for ((yr, gr), out) in y
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(ga.data_mut().chunks_mut(c))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                }
                self.accumulate(adj, a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(a).shape(), g.data()[0]);
                self.accumulate(adj, a, ga);
            }
            Op::Mean(a) => {
                let t = self.value(a);
                let ga = Tensor::full(t.shape(), g.data()[0] / t.len() as f64);
                self.accumulate(adj, a, ga);
            }
        }
    }
}

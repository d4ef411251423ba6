//! Define-by-run reverse-mode gradient tape over [`Matrix`] values.
//!
//! A tape is rebuilt for every training step: record the forward pass, call
//! [`Tape::backward`] on a scalar loss, read gradients off the returned
//! [`Gradients`]. Nodes are appended in topological order by construction, so
//! the backward pass is a single reverse sweep. Constants enter as untracked
//! leaves and receive no gradient; an operation output is tracked whenever any
//! of its inputs is.

use super::{Matrix, NumericsError, Result};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalarNode(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    RowNormalize(NodeId),
    RowUnitNormalize(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    PickEntry(NodeId, usize, usize),
    ColProduct(NodeId),
    SmoothL1(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node's value, if the node was tracked
    /// and reachable from the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Untracked input (constant); receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf (trainable parameter or probed input).
    pub fn parameter(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn binary(&mut self, a: NodeId, b: NodeId, value: Matrix, op: Op) -> NodeId {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    fn unary(&mut self, a: NodeId, value: Matrix, op: Op) -> NodeId {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.unary(a, value, Op::Scale(a, factor))
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).scalar()?;
        let value = self.value(a).scale(factor);
        Ok(self.binary(a, s, value, Op::MulScalarNode(a, s)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.unary(a, value, Op::SoftmaxRows(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(a, value, Op::Sigmoid(a))
    }

    /// Natural log. Pair with [`Tape::clamp`] to keep inputs positive.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.unary(a, value, Op::Clamp(a, lo, hi))
    }

    /// Divides each row by its sum; rows must sum to a positive value.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).row_normalize()?;
        Ok(self.unary(a, value, Op::RowNormalize(a)))
    }

    /// Scales each row to unit Euclidean length; rows with norm below `eps`
    /// are divided by `eps` instead so the op stays finite and smooth there.
    pub fn row_unit_normalize(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for j in 0..x.cols() {
                value.set(i, j, x.get(i, j) / norm);
            }
        }
        self.unary(a, value, Op::RowUnitNormalize(a, eps))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.binary(a, b, value, Op::ConcatCols(a, b)))
    }

    /// `a` is MxN, `bias` is 1xN, broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != n {
            return Err(NumericsError::DimMismatch {
                op: "add_row_broadcast",
                left_rows: m,
                left_cols: n,
                right_rows: b.rows(),
                right_cols: b.cols(),
            });
        }
        let mut value = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                value.set(i, j, value.get(i, j) + b.get(0, j));
            }
        }
        Ok(self.binary(a, bias, value, Op::AddRowBroadcast(a, bias)))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let len = self.value(a).len() as f64;
        let value = Matrix::filled(1, 1, self.value(a).sum() / len);
        self.unary(a, value, Op::Mean(a))
    }

    /// Extracts entry (row, col) as a 1x1 node.
    pub fn pick(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).get(row, col));
        self.unary(a, value, Op::PickEntry(a, row, col))
    }

    /// Column-wise product: out is 1xN with out[j] = prod_i a[i][j].
    pub fn col_product(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let mut value = Matrix::filled(1, n, 1.0);
        for j in 0..n {
            let mut p = 1.0;
            for i in 0..m {
                p *= self.value(a).get(i, j);
            }
            value.set(0, j, p);
        }
        self.unary(a, value, Op::ColProduct(a))
    }

    /// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn smooth_l1(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(crate::losses::smooth_l1);
        self.unary(a, value, Op::SmoothL1(a))
    }

    /// Reverse sweep from a 1x1 loss node. Populates gradients for every
    /// tracked node reachable from the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(NumericsError::LossNotScalar { rows: lv.rows(), cols: lv.cols() });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], target: NodeId, delta: Matrix) {
        if !self.tracked(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.accumulate(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(a) {
                    let bt = self.value(b).transpose();
                    self.accumulate(grads, a, g.matmul(&bt)?);
                }
                if self.tracked(b) {
                    let at = self.value(a).transpose();
                    self.accumulate(grads, b, at.matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if self.tracked(a) {
                    self.accumulate(grads, a, g.hadamard(self.value(b))?);
                }
                if self.tracked(b) {
                    self.accumulate(grads, b, g.hadamard(self.value(a))?);
                }
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, a, g.scale(factor));
            }
            Op::MulScalarNode(a, s) => {
                let factor = self.value(s).scalar()?;
                if self.tracked(a) {
                    self.accumulate(grads, a, g.scale(factor));
                }
                if self.tracked(s) {
                    let ds = g.frobenius_dot(self.value(a))?;
                    self.accumulate(grads, s, Matrix::filled(1, 1, ds));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, a, g.transpose());
            }
            Op::SoftmaxRows(a) => {
                // Per row: dx_j = y_j * (g_j - sum_k g_k y_k)
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..y.cols() {
                        dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::Relu(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        if x.get(i, j) <= 0.0 {
                            dx.set(i, j, 0.0);
                        }
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    for j in 0..y.cols() {
                        let s = y.get(i, j);
                        dx.set(i, j, dx.get(i, j) * s * (1.0 - s));
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::Log(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        dx.set(i, j, dx.get(i, j) / x.get(i, j));
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let v = x.get(i, j);
                        if v < lo || v > hi {
                            dx.set(i, j, 0.0);
                        }
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::RowNormalize(a) => {
                // out_ij = x_ij / s_i  =>  dx_im = (g_im - sum_j g_ij out_ij) / s_i
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let s: f64 = x.row(i).iter().sum();
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..x.cols() {
                        dx.set(i, j, (g.get(i, j) - dot) / s);
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::RowUnitNormalize(a, eps) => {
                // y = x / n with n = max(||x||, eps); above eps the norm is a
                // function of x: dx = (g - y (g . y)) / n, else dx = g / eps.
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > eps {
                        let dot: f64 =
                            g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..x.cols() {
                            dx.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norm);
                        }
                    } else {
                        for j in 0..x.cols() {
                            dx.set(i, j, g.get(i, j) / eps);
                        }
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::ConcatCols(a, b) => {
                let (ac, bc) = (self.value(a).cols(), self.value(b).cols());
                if self.tracked(a) {
                    let mut da = Matrix::zeros(g.rows(), ac);
                    for i in 0..g.rows() {
                        for j in 0..ac {
                            da.set(i, j, g.get(i, j));
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.tracked(b) {
                    let mut db = Matrix::zeros(g.rows(), bc);
                    for i in 0..g.rows() {
                        for j in 0..bc {
                            db.set(i, j, g.get(i, ac + j));
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.tracked(bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for j in 0..g.cols() {
                        let mut acc = 0.0;
                        for i in 0..g.rows() {
                            acc += g.get(i, j);
                        }
                        db.set(0, j, acc);
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            Op::Sum(a) => {
                let gv = g.get(0, 0);
                let x = self.value(a);
                self.accumulate(grads, a, Matrix::filled(x.rows(), x.cols(), gv));
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let gv = g.get(0, 0) / x.len() as f64;
                self.accumulate(grads, a, Matrix::filled(x.rows(), x.cols(), gv));
            }
            Op::PickEntry(a, row, col) => {
                let x = self.value(a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                dx.set(row, col, g.get(0, 0));
                self.accumulate(grads, a, dx);
            }
            Op::ColProduct(a) => {
                // d/dx_ij = g_j * prod_{i' != i} x_i'j, via prefix/suffix products
                // so zero entries stay differentiable.
                let x = self.value(a);
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Matrix::zeros(m, n);
                for j in 0..n {
                    let mut prefix = vec![1.0; m + 1];
                    for i in 0..m {
                        prefix[i + 1] = prefix[i] * x.get(i, j);
                    }
                    let mut suffix = vec![1.0; m + 1];
                    for i in (0..m).rev() {
                        suffix[i] = suffix[i + 1] * x.get(i, j);
                    }
                    for i in 0..m {
                        dx.set(i, j, g.get(0, j) * prefix[i] * suffix[i + 1]);
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::SmoothL1(a) => {
                let x = self.value(a);
                let mut dx = g.clone();
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let v = x.get(i, j);
                        let d = if v.abs() < 1.0 { v } else { v.signum() };
                        dx.set(i, j, dx.get(i, j) * d);
                    }
                }
                self.accumulate(grads, a, dx);
            }
        }
        Ok(())
    }
}

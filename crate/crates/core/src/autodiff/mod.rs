//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order. Each recorded node
//! keeps its forward value plus whatever the backward rule needs. Calling
//! [`Tape::backward`] walks the nodes in reverse recording order exactly once
//! and accumulates adjoints into the inputs, left operand first.
//!
//! ```
//! use tail2learn::autodiff::Tape;
//! use tail2learn::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap());
//! let y = tape.relu(w).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, w).as_slice(), &[1.0, 0.0]);
//! ```

mod contrast;

use std::sync::Arc;

pub use contrast::{AnchorSpec, ContrastPlan};

use crate::error::{Error, Result};
use crate::matrix::{CsrMatrix, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One active row of a cross-entropy term.
#[derive(Clone, Copy, Debug)]
pub struct CeRow {
    pub row: usize,
    pub target: usize,
    pub weight: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Transpose(Var),
    ConcatRows(Var, Var),
    RowGather(Var, Arc<Vec<usize>>),
    RowScatter(Var, Arc<Vec<usize>>),
    BroadcastCol(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    RowL2Normalize { input: Var, norms: Vec<f64> },
    ReduceSum(Var),
    ReduceMean(Var),
    LogSumExpRow(Var),
    SoftmaxCe { logits: Var, rows: Arc<Vec<CeRow>>, probs: Matrix, total_weight: f64 },
    Contrast { anchors: Var, members: Var, plan: Arc<ContrastPlan>, cache: contrast::Cache },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single owner; not shared across threads while
/// recording.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of the right shape when `v` did not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn v(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.v(a).matmul(self.v(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn spmm(&mut self, s: Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let out = s.spmm(self.v(b))?;
        self.push("spmm", out, Op::SpMM(s, b), &[b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.v(a).shape() != self.v(b).shape() {
            return Err(shape_err(op, self.v(a), self.v(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.v(a).zip_map(self.v(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.v(a).zip_map(self.v(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.v(a).zip_map(self.v(b), |x, y| x * y);
        self.push("hadamard", out, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.v(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Adds a 1 x c row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.v(a), self.v(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(shape_err("add_row", am, rm));
        }
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.v(a), self.v(b));
        if am.cols() != bm.cols() {
            return Err(shape_err("concat_rows", am, bm));
        }
        let mut data = Vec::with_capacity(am.len() + bm.len());
        data.extend_from_slice(am.as_slice());
        data.extend_from_slice(bm.as_slice());
        let out = Matrix::from_vec(am.rows() + bm.rows(), am.cols(), data)?;
        self.push("concat_rows", out, Op::ConcatRows(a, b), &[a, b])
    }

    /// Rows `idx` of `a`, in order. Repeated indices are allowed.
    pub fn row_gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.v(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                what: "row_gather",
                index: bad,
                bound: n,
            });
        }
        let out = self.v(a).gather_rows(idx);
        self.push("row_gather", out, Op::RowGather(a, Arc::new(idx.to_vec())), &[a])
    }

    /// Places row j of `a` at row `idx[j]` of an `n`-row zero matrix.
    /// Indices must be distinct.
    pub fn row_scatter(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let am = self.v(a);
        if am.rows() != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "row_scatter",
                left: am.shape(),
                right: (idx.len(), am.cols()),
            });
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "row_scatter",
                    index: i,
                    bound: n,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("row_scatter: duplicate index {i}")));
            }
        }
        let mut out = Matrix::zeros(n, am.cols());
        for (j, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(am.row(j));
        }
        self.push("row_scatter", out, Op::RowScatter(a, Arc::new(idx.to_vec())), &[a])
    }

    /// Repeats an n x 1 column `cols` times.
    pub fn broadcast_col(&mut self, v: Var, cols: usize) -> Result<Var> {
        let vm = self.v(v);
        if vm.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_col",
                left: vm.shape(),
                right: (vm.rows(), 1),
            });
        }
        let mut out = Matrix::zeros(vm.rows(), cols);
        for r in 0..vm.rows() {
            out.row_mut(r).fill(vm.get(r, 0));
        }
        self.push("broadcast_col", out, Op::BroadcastCol(v), &[v])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    /// Scales each row to unit L2 norm. Rows with norm below 1e-12 become zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let am = self.v(a);
        let mut out = am.clone();
        let mut norms = Vec::with_capacity(am.rows());
        for r in 0..am.rows() {
            let norm = am.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let row = out.row_mut(r);
            if norm < 1e-12 {
                row.fill(0.0);
                norms.push(0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= norm);
                norms.push(norm);
            }
        }
        self.push("row_l2_normalize", out, Op::RowL2Normalize { input: a, norms }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.v(a).sum());
        self.push("sum", out, Op::ReduceSum(a), &[a])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let am = self.v(a);
        if am.is_empty() {
            return Err(Error::Empty("reduce_mean"));
        }
        let out = Matrix::scalar(am.sum() / am.len() as f64);
        self.push("reduce_mean", out, Op::ReduceMean(a), &[a])
    }

    /// Per-row log-sum-exp, n x 1.
    pub fn logsumexp_row(&mut self, a: Var) -> Result<Var> {
        let am = self.v(a);
        let mut out = Matrix::zeros(am.rows(), 1);
        for r in 0..am.rows() {
            out.set(r, 0, logsumexp(am.row(r).iter().copied()));
        }
        self.push("logsumexp_row", out, Op::LogSumExpRow(a), &[a])
    }

    /// Mean softmax cross-entropy over rows where `mask` is set.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        mask: &[bool],
    ) -> Result<Var> {
        self.weighted_softmax_cross_entropy(logits, targets, mask, None)
    }

    /// Cross-entropy with per-class weights, normalized by the total weight
    /// of the active rows.
    pub fn weighted_softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        mask: &[bool],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let lm = self.v(logits);
        if targets.len() != lm.rows() || mask.len() != lm.rows() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: lm.shape(),
                right: (targets.len(), mask.len()),
            });
        }
        let mut rows = Vec::new();
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let Some(t) = t else { continue };
            if t >= lm.cols() {
                return Err(Error::IndexOutOfRange {
                    what: "softmax_cross_entropy target",
                    index: t,
                    bound: lm.cols(),
                });
            }
            let weight = class_weights.map_or(1.0, |w| w[t]);
            rows.push(CeRow { row: i, target: t, weight });
        }
        self.cross_entropy_rows(logits, rows)
    }

    /// Cross-entropy over an explicit row list.
    pub fn cross_entropy_rows(&mut self, logits: Var, rows: Vec<CeRow>) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Empty("softmax_cross_entropy mask"));
        }
        let lm = self.v(logits);
        let mut probs = Matrix::zeros(lm.rows(), lm.cols());
        let mut total = 0.0;
        let mut total_weight = 0.0;
        for cr in &rows {
            let x = lm.row(cr.row);
            let lse = logsumexp(x.iter().copied());
            for (p, &xv) in probs.row_mut(cr.row).iter_mut().zip(x) {
                *p = (xv - lse).exp();
            }
            total += cr.weight * (lse - x[cr.target]);
            total_weight += cr.weight;
        }
        if total_weight <= 0.0 {
            return Err(Error::invalid("cross-entropy weights sum to zero"));
        }
        let out = Matrix::scalar(total / total_weight);
        let op = Op::SoftmaxCe {
            logits,
            rows: Arc::new(rows),
            probs,
            total_weight,
        };
        self.push("softmax_cross_entropy", out, op, &[logits])
    }

    /// Fused contrastive objective; see [`ContrastPlan`].
    pub fn contrastive(&mut self, anchors: Var, members: Var, plan: Arc<ContrastPlan>) -> Result<Var> {
        let (loss, cache) = contrast::forward(self.v(anchors), self.v(members), &plan)?;
        let op = Op::Contrast {
            anchors,
            members,
            plan,
            cache,
        };
        self.push("contrastive", Matrix::scalar(loss), op, &[anchors, members])
    }

    /// Reverse pass from a 1x1 loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.v(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.v(*a), self.v(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(&bm.transpose())?);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, am.transpose().matmul(g)?);
                }
            }
            Op::SpMM(s, b) => acc(*b, s.transpose().spmm(g)?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.zip_map(self.v(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.v(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut d = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in d.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*row, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatRows(a, b) => {
                let split = self.v(*a).len();
                let cols = g.cols();
                let (top, bottom) = g.as_slice().split_at(split);
                acc(*a, Matrix::from_vec(split / cols.max(1), cols, top.to_vec())?);
                acc(*b, Matrix::from_vec(bottom.len() / cols.max(1), cols, bottom.to_vec())?);
            }
            Op::RowGather(a, idx) => {
                let am = self.v(*a);
                let mut d = Matrix::zeros(am.rows(), am.cols());
                for (j, &i) in idx.iter().enumerate() {
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(j)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::RowScatter(a, idx) => acc(*a, g.gather_rows(idx)),
            Op::BroadcastCol(v) => {
                let mut d = Matrix::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    d.set(r, 0, g.row(r).iter().sum());
                }
                acc(*v, d);
            }
            Op::Relu(a) => acc(*a, g.zip_map(self.v(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.v(*a), |d, x| d / x)),
            Op::RowL2Normalize { input, norms } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * proj) / norm;
                    }
                }
                acc(*input, d);
            }
            Op::ReduceSum(a) => {
                let (r, c) = self.v(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::ReduceMean(a) => {
                let (r, c) = self.v(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::LogSumExpRow(a) => {
                let am = self.v(*a);
                let mut d = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let lse = node.value.get(r, 0);
                    let gr = g.get(r, 0);
                    for (o, &x) in d.row_mut(r).iter_mut().zip(am.row(r)) {
                        *o = gr * (x - lse).exp();
                    }
                }
                acc(*a, d);
            }
            Op::SoftmaxCe {
                logits,
                rows,
                probs,
                total_weight,
            } => {
                let scale = g.item() / total_weight;
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for cr in rows.iter() {
                    let w = scale * cr.weight;
                    for (o, &p) in d.row_mut(cr.row).iter_mut().zip(probs.row(cr.row)) {
                        *o += w * p;
                    }
                    let cur = d.get(cr.row, cr.target);
                    d.set(cr.row, cr.target, cur - w);
                }
                acc(*logits, d);
            }
            Op::Contrast {
                anchors,
                members,
                plan,
                cache,
            } => {
                let (da, dm) = contrast::backward(self.v(*anchors), self.v(*members), plan, cache, g.item());
                acc(*anchors, da);
                acc(*members, dm);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, x).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn gather_scatter_adjoint_pair() {
        let mut tape = Tape::new();
        let base = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let picked = tape.row_gather(base, &[2, 0]).unwrap();
        let placed = tape.row_scatter(picked, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(placed).as_slice(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        assert!(tape.row_scatter(picked, &[1, 1], 3).is_err());
        assert!(tape.row_gather(base, &[3]).is_err());
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::filled(2, 3, 0.7));
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, w), Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::filled(2, 2, 1.5));
        let unused = tape.param(Matrix::filled(1, 4, 1.0));
        let e = tape.exp(w).unwrap();
        let s = tape.sum(e).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, w), Matrix::zeros(2, 2));
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused), Matrix::zeros(1, 4));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 2));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn non_finite_is_error() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::from_rows(&[vec![-1.0]]).unwrap());
        assert!(matches!(tape.log(w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn normalize_leaves_tiny_rows_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[vec![3.0, 4.0], vec![1e-14, 0.0]]).unwrap());
        let y = tape.row_l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn mean_sigmoid_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 3);
        let w = random(&mut rng, 3, 2);
        let f = |w: &Matrix| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(w.clone());
            let p = t.matmul(xv, wv).unwrap();
            let s = t.sigmoid(p).unwrap();
            let l = t.reduce_mean(s).unwrap();
            (t, wv, l)
        };
        let (tape, wv, l) = f(&w);
        let analytic = tape.backward(l).unwrap().wrt(&tape, wv);
        let numeric = numeric_gradient(&w, 1e-6, |w| {
            let (t, _, l) = f(w);
            t.value(l).item()
        });
        assert!(max_rel_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 3, 3);
        let mut tape = Tape::new();
        let w = tape.param(x);
        let e = tape.tanh(w).unwrap();
        let l1 = tape.sum(e).unwrap();
        let sq = tape.hadamard(w, w).unwrap();
        let l2 = tape.reduce_mean(sq).unwrap();
        let a = tape.scale(l1, 2.5).unwrap();
        let b = tape.scale(l2, -0.75).unwrap();
        let combo = tape.add(a, b).unwrap();
        let g1 = tape.backward(l1).unwrap().wrt(&tape, w);
        let g2 = tape.backward(l2).unwrap().wrt(&tape, w);
        let gc = tape.backward(combo).unwrap().wrt(&tape, w);
        let want = g1.zip_map(&g2, |p, q| 2.5 * p - 0.75 * q);
        assert!(gc.max_abs_diff(&want) < 1e-12);
    }
}

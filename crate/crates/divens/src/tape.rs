//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a Wengert tape: each operation evaluates eagerly, records
//! its inputs, and stores its result. [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients for every leaf created with
//! `requires_grad`. The primitive set is deliberately small — exactly what a
//! relu MLP, the diversity objective (including the log-determinant of a
//! small Gram matrix), and gradient-based attacks need.
//!
//! Evaluation order is fixed by construction order, so re-running an
//! identical graph is bit-identical.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Floor applied inside `ln` and `xlogx` so gradients stay finite on the
/// closed probability simplex.
const LN_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Matrix product `[n,k] x [k,m]`.
    Matmul(usize, usize),
    /// Elementwise sum; rhs may be a `[1,m]` row broadcast over rows.
    Add(usize, usize),
    /// Elementwise difference (same shape).
    Sub(usize, usize),
    /// Elementwise product (same shape).
    Mul(usize, usize),
    /// Multiplication by a compile-time constant.
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    /// Natural log, clamped at `LN_FLOOR`.
    Ln(usize),
    /// `x ln x` with the convention `0 ln 0 = 0`.
    XLogX(usize),
    Tanh(usize),
    /// Row-wise softmax with log-sum-exp stabilization.
    Softmax(usize),
    /// Row-wise L2 norm, `[n,m] -> [n,1]`.
    L2NormRows(usize),
    /// `[n,m] / [n,1]`, the divisor broadcast across columns.
    DivCols(usize, usize),
    /// Column sums, `[n,m] -> [1,m]`.
    SumRows(usize),
    /// Row sums, `[n,m] -> [n,1]`.
    SumCols(usize),
    /// Total sum, `[n,m] -> [1,1]`.
    SumAll(usize),
    /// Vertical stack of same-width blocks.
    ConcatRows(Vec<usize>),
    /// Single-row slice `[n,m] -> [1,m]`.
    Row(usize, usize),
    /// Drops one column, preserving order, `[n,m] -> [n,m-1]`.
    RemoveCol(usize, usize),
    /// Per-row gather: element `(i, idx[i])` of the input, `[n,m] -> [n,1]`.
    SelectCols(usize, Vec<usize>),
    Transpose(usize),
    /// Determinant of a small square matrix, `[k,k] -> [1,1]`.
    Det(usize),
    /// Inverse of a small square matrix.
    Inv(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    /// Gradient of the loss with respect to `var`, if it was tracked.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    /// Empty tape.
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing has been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are tracked only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Registers a constant (gradient never tracked).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Value computed at `var`.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
    }

    /// Matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for t in 0..k {
                let aval = ta.at(i, t);
                if aval == 0.0 {
                    continue;
                }
                let brow = tb.row_slice(t);
                let orow = &mut out.data_mut()[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += aval * brow[j];
                }
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Matmul(a.0, b.0), out, needs))
    }

    /// Elementwise sum. The right operand may be `[1,m]`, broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let broadcast = tb.rows() == 1 && ta.rows() != 1 && tb.cols() == ta.cols();
        if !broadcast && !ta.same_shape(tb) {
            return Err(Self::shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        let m = ta.cols();
        for i in 0..ta.rows() {
            let src = if broadcast { tb.row_slice(0) } else { tb.row_slice(i) };
            let dst = &mut out.data_mut()[i * m..(i + 1) * m];
            for j in 0..m {
                dst[j] += src[j];
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Add(a.0, b.0), out, needs))
    }

    /// Elementwise difference (shapes must match).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("sub", ta, tb));
        }
        let mut out = ta.clone();
        for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o -= v;
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Sub(a.0, b.0), out, needs))
    }

    /// Elementwise product (shapes must match).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let mut out = ta.clone();
        for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= v;
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::Mul(a.0, b.0), out, needs))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Scale(a.0, c), out, needs)
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Relu(a.0), out, needs)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = v.exp();
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Exp(a.0), out, needs)
    }

    /// Elementwise natural log, clamped at `1e-300` so probabilities that
    /// underflow to zero yield a large-but-finite value instead of `-inf`.
    pub fn ln(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = v.max(LN_FLOOR).ln();
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Ln(a.0), out, needs)
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`, the entropy workhorse.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = if *v <= 0.0 { 0.0 } else { *v * v.ln() };
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::XLogX(a.0), out, needs)
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Tanh(a.0), out, needs)
    }

    /// Row-wise softmax over the last axis, stabilized by subtracting the
    /// row maximum before exponentiation.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = ta.row_slice(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut sum = 0.0;
            let orow = &mut out.data_mut()[i * m..(i + 1) * m];
            for j in 0..m {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Softmax(a.0), out, needs)
    }

    /// Row-wise L2 norm, `[n,m] -> [n,1]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let n = ta.rows();
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let s: f64 = ta.row_slice(i).iter().map(|v| v * v).sum();
            out.set(i, 0, s.sqrt());
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::L2NormRows(a.0), out, needs)
    }

    /// Divides each row of `a` by the matching entry of the `[n,1]` column `b`.
    pub fn div_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if tb.cols() != 1 || tb.rows() != ta.rows() {
            return Err(Self::shape_err("div_cols", ta, tb));
        }
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = ta.clone();
        for i in 0..n {
            let d = tb.at(i, 0);
            for j in 0..m {
                let v = out.at(i, j) / d;
                out.set(i, j, v);
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Op::DivCols(a.0, b.0), out, needs))
    }

    /// Sums over rows (axis 0): `[n,m] -> [1,m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(1, m);
        for i in 0..n {
            let row = ta.row_slice(i);
            for j in 0..m {
                out.data_mut()[j] += row[j];
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::SumRows(a.0), out, needs)
    }

    /// Sums over columns (axis 1): `[n,m] -> [n,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let n = ta.rows();
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            out.set(i, 0, ta.row_slice(i).iter().sum());
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::SumCols(a.0), out, needs)
    }

    /// Sums every entry: `[n,m] -> [1,1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(&[a.0]);
        self.push(Op::SumAll(a.0), Tensor::scalar(total), needs)
    }

    /// Mean over rows then columns: `[n,m] -> [1,1]`, sum / (n*m).
    pub fn mean_all(&mut self, a: Var) -> Var {
        let count = {
            let t = &self.nodes[a.0].value;
            (t.rows() * t.cols()) as f64
        };
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count)
    }

    /// Stacks blocks vertically. All inputs must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let m = self.nodes[parts[0].0].value.cols();
        let mut n = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != m {
                return Err(Self::shape_err(
                    "concat_rows",
                    &self.nodes[parts[0].0].value,
                    t,
                ));
            }
            n += t.rows();
        }
        let mut data = Vec::with_capacity(n * m);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Op::ConcatRows(ids), Tensor::new(n, m, data)?, needs))
    }

    /// Extracts row `i` as `[1,m]`.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if i >= ta.rows() {
            return Err(Error::InvalidArgument(format!(
                "row {i} out of range for {} rows",
                ta.rows()
            )));
        }
        let out = Tensor::row(ta.row_slice(i).to_vec());
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::Row(a.0, i), out, needs))
    }

    /// Removes column `j`, preserving the order of the rest.
    pub fn remove_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        if j >= m {
            return Err(Error::InvalidArgument(format!(
                "column {j} out of range for {m} columns"
            )));
        }
        if m < 2 {
            return Err(Error::InvalidArgument(
                "remove_col needs at least two columns".into(),
            ));
        }
        let mut data = Vec::with_capacity(n * (m - 1));
        for i in 0..n {
            let row = ta.row_slice(i);
            data.extend_from_slice(&row[..j]);
            data.extend_from_slice(&row[j + 1..]);
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::RemoveCol(a.0, j), Tensor::new(n, m - 1, data)?, needs))
    }

    /// Gathers one entry per row: output `[i,0] = a[i, idx[i]]`.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        if idx.len() != n {
            return Err(Error::ShapeMismatch {
                op: "select_cols",
                details: format!("{} indices for {n} rows", idx.len()),
            });
        }
        let mut out = Tensor::zeros(n, 1);
        for (i, &j) in idx.iter().enumerate() {
            if j >= m {
                return Err(Error::LabelOutOfRange {
                    label: j,
                    classes: m,
                });
            }
            out.set(i, 0, ta.at(i, j));
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::SelectCols(a.0, idx.to_vec()), out, needs))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(m, n);
        for i in 0..n {
            for j in 0..m {
                out.set(j, i, ta.at(i, j));
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(Op::Transpose(a.0), out, needs)
    }

    /// Determinant of a square matrix (side at most
    /// [`linalg::MAX_DET_SIZE`]).
    pub fn det(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rows() != ta.cols() {
            return Err(Error::NotSquare {
                op: "det",
                rows: ta.rows(),
                cols: ta.cols(),
            });
        }
        let d = linalg::det(ta.data(), ta.rows())?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::Det(a.0), Tensor::scalar(d), needs))
    }

    /// Inverse of a square matrix (side at most [`linalg::MAX_DET_SIZE`]).
    pub fn inv(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let k = ta.rows();
        if k != ta.cols() {
            return Err(Error::NotSquare {
                op: "inv",
                rows: ta.rows(),
                cols: ta.cols(),
            });
        }
        let inv = linalg::inverse(ta.data(), k)?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(Op::Inv(a.0), Tensor::new(k, k, inv)?, needs))
    }

    /// Reverse-mode gradient of a scalar `loss` with respect to every
    /// tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.shape() != [1, 1] {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            self.accumulate(id, &g, &mut grads)?;
        }
        Ok(GradMap { grads })
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        // Adds `delta` into the gradient slot for node `target`.
        fn acc(grads: &mut [Option<Tensor>], target: usize, shape: (usize, usize)) -> &mut Tensor {
            grads[target].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
        }
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].needs_grad {
                    // dA = g . B^T
                    let da = acc(grads, *a, (n, k));
                    for i in 0..n {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g.at(i, j) * tb.at(t, j);
                            }
                            let v = da.at(i, t) + s;
                            da.set(i, t, v);
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T . g
                    let db = acc(grads, *b, (k, m));
                    for t in 0..k {
                        for j in 0..m {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += ta.at(i, t) * g.at(i, j);
                            }
                            let v = db.at(t, j) + s;
                            db.set(t, j, v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let da = acc(grads, *a, (ta.rows(), ta.cols()));
                    for (o, v) in da.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = acc(grads, *b, (tb.rows(), tb.cols()));
                    if tb.rows() == 1 && ta.rows() != 1 {
                        // Broadcast add: fold gradient rows together.
                        let m = tb.cols();
                        for i in 0..g.rows() {
                            let row = g.row_slice(i);
                            for j in 0..m {
                                db.data_mut()[j] += row[j];
                            }
                        }
                    } else {
                        for (o, v) in db.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].needs_grad {
                    let shape = (g.rows(), g.cols());
                    let da = acc(grads, *a, shape);
                    for (o, v) in da.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let shape = (g.rows(), g.cols());
                    let db = acc(grads, *b, shape);
                    for (o, v) in db.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let da = acc(grads, *a, (ta.rows(), ta.cols()));
                    for ((o, gv), bv) in da.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = acc(grads, *b, (tb.rows(), tb.cols()));
                    for ((o, gv), av) in db.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].needs_grad {
                    let da = acc(grads, *a, (g.rows(), g.cols()));
                    for (o, v) in da.data_mut().iter_mut().zip(g.data()) {
                        *o += c * v;
                    }
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let da = acc(grads, *a, (ta.rows(), ta.cols()));
                    for ((o, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        // Subgradient 0 at the kink (and on the negative side).
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.nodes[*a].needs_grad {
                    let val = &node.value;
                    let da = acc(grads, *a, (val.rows(), val.cols()));
                    for ((o, gv), ev) in da.data_mut().iter_mut().zip(g.data()).zip(val.data()) {
                        *o += gv * ev;
                    }
                }
            }
            Op::Ln(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let da = acc(grads, *a, (ta.rows(), ta.cols()));
                    for ((o, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv / xv.max(LN_FLOOR);
                    }
                }
            }
            Op::XLogX(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let da = acc(grads, *a, (ta.rows(), ta.cols()));
                    for ((o, gv), xv) in da.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * (xv.max(LN_FLOOR).ln() + 1.0);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.nodes[*a].needs_grad {
                    let val = &node.value;
                    let da = acc(grads, *a, (val.rows(), val.cols()));
                    for ((o, gv), tv) in da.data_mut().iter_mut().zip(g.data()).zip(val.data()) {
                        *o += gv * (1.0 - tv * tv);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.nodes[*a].needs_grad {
                    let s = &node.value;
                    let (n, m) = (s.rows(), s.cols());
                    let da = acc(grads, *a, (n, m));
                    for i in 0..n {
                        let srow = s.row_slice(i);
                        let grow = g.row_slice(i);
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            drow[j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::L2NormRows(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let norms = &node.value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    for i in 0..n {
                        let r = norms.at(i, 0).max(LN_FLOOR);
                        let gi = g.at(i, 0);
                        let xrow = ta.row_slice(i);
                        let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            drow[j] += gi * xrow[j] / r;
                        }
                    }
                }
            }
            Op::DivCols(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, m) = (ta.rows(), ta.cols());
                if self.nodes[*a].needs_grad {
                    let da = acc(grads, *a, (n, m));
                    for i in 0..n {
                        let d = tb.at(i, 0);
                        let grow = g.row_slice(i);
                        let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            drow[j] += grow[j] / d;
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = acc(grads, *b, (n, 1));
                    for i in 0..n {
                        let d = tb.at(i, 0);
                        let grow = g.row_slice(i);
                        let arow = ta.row_slice(i);
                        let mut s = 0.0;
                        for j in 0..m {
                            s += grow[j] * arow[j];
                        }
                        let v = db.at(i, 0) - s / (d * d);
                        db.set(i, 0, v);
                    }
                }
            }
            Op::SumRows(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    let grow = g.row_slice(0);
                    for i in 0..n {
                        let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            drow[j] += grow[j];
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    for i in 0..n {
                        let gi = g.at(i, 0);
                        let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            drow[j] += gi;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    let gv = g.at(0, 0);
                    for o in da.data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = &self.nodes[p].value;
                    let (rows, m) = (tp.rows(), tp.cols());
                    if self.nodes[p].needs_grad {
                        let dp = acc(grads, p, (rows, m));
                        for i in 0..rows {
                            let grow = g.row_slice(offset + i);
                            let drow = &mut dp.data_mut()[i * m..(i + 1) * m];
                            for j in 0..m {
                                drow[j] += grow[j];
                            }
                        }
                    }
                    offset += rows;
                }
            }
            Op::Row(a, i) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    let grow = g.row_slice(0);
                    let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                    for j in 0..m {
                        drow[j] += grow[j];
                    }
                }
            }
            Op::RemoveCol(a, jdrop) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    for i in 0..n {
                        let grow = g.row_slice(i);
                        let drow = &mut da.data_mut()[i * m..(i + 1) * m];
                        for (src, j) in (0..m).filter(|j| j != jdrop).enumerate() {
                            drow[j] += grow[src];
                        }
                    }
                }
            }
            Op::SelectCols(a, idx) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    for (i, &j) in idx.iter().enumerate() {
                        let v = da.at(i, j) + g.at(i, 0);
                        da.set(i, j, v);
                    }
                }
            }
            Op::Transpose(a) => {
                if self.nodes[*a].needs_grad {
                    let ta = &self.nodes[*a].value;
                    let (n, m) = (ta.rows(), ta.cols());
                    let da = acc(grads, *a, (n, m));
                    for i in 0..n {
                        for j in 0..m {
                            let v = da.at(i, j) + g.at(j, i);
                            da.set(i, j, v);
                        }
                    }
                }
            }
            Op::Det(a) => {
                if self.nodes[*a].needs_grad {
                    // d det(A) / dA = det(A) . A^{-T}
                    let ta = &self.nodes[*a].value;
                    let k = ta.rows();
                    let lu = linalg::factor(ta.data(), k)?;
                    let inv = lu.inverse().map_err(|e| match e {
                        Error::Singular { cond, .. } => Error::Singular {
                            op: "det-backward",
                            cond,
                        },
                        other => other,
                    })?;
                    let d = node.value.at(0, 0);
                    let gv = g.at(0, 0);
                    let da = acc(grads, *a, (k, k));
                    for i in 0..k {
                        for j in 0..k {
                            // transpose of the inverse
                            let v = da.at(i, j) + gv * d * inv[j * k + i];
                            da.set(i, j, v);
                        }
                    }
                }
            }
            Op::Inv(a) => {
                if self.nodes[*a].needs_grad {
                    // dA = -B^T g B^T where B = A^{-1} (the stored value).
                    let b = &node.value;
                    let k = b.rows();
                    let mut bt_g = vec![0.0; k * k];
                    for i in 0..k {
                        for j in 0..k {
                            let mut s = 0.0;
                            for t in 0..k {
                                s += b.at(t, i) * g.at(t, j);
                            }
                            bt_g[i * k + j] = s;
                        }
                    }
                    let da = acc(grads, *a, (k, k));
                    for i in 0..k {
                        for j in 0..k {
                            let mut s = 0.0;
                            for t in 0..k {
                                s += bt_g[i * k + t] * b.at(j, t);
                            }
                            let v = da.at(i, j) - s;
                            da.set(i, j, v);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / (|central| + 1e-8)`. `f` must evaluate the same
/// scalar function whose gradient at `point` is `analytic`.
pub fn finite_diff_check<F>(f: F, analytic: &Tensor, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite_diff_check: h must be > 0".into()));
    }
    if !analytic.same_shape(point) {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check",
            details: format!("{:?} vs {:?}", analytic.shape(), point.shape()),
        });
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.data().len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * h);
        let rel = (analytic.data()[i] - central).abs() / (central.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(rows: usize, cols: usize, tag: &str) -> Tensor {
        let mut r = rng::stream(42, tag, 0);
        let data: Vec<f64> = (0..rows * cols).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, -1.0]), true);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[1.0, 0.0]);
        let s = g.sum_all(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0, 0.0, 0.0]), false);
        let s = g.softmax(x);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.leaf(Tensor::row(vec![1000.0, 999.0, -1000.0]), false);
        let sb = g.softmax(big);
        let vals = g.value(sb).data();
        assert!(vals.iter().all(|v| v.is_finite()));
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn det_matches_cosine_identity() {
        let mut g = Graph::new();
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let m = g.leaf(Tensor::new(2, 2, vec![1.0, c, c, 1.0]).unwrap(), false);
        let d = g.det(m).unwrap();
        assert!((g.value(d).scalar_value().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logdet_gradient_at_orthonormal_columns_is_2m() {
        // d/dM log det(M^T M) = 2 M (M^T M)^{-1} = 2M when M^T M = I.
        let mut g = Graph::new();
        let m = g.leaf(
            Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            true,
        );
        let mt = g.transpose(m);
        let gram = g.matmul(mt, m).unwrap();
        let d = g.det(gram).unwrap();
        let ld = g.ln(d);
        let grads = g.backward(ld).unwrap();
        let dm = grads.get(m).unwrap();
        let expect = [2.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        for (a, b) in dm.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn finite_diff_quadratic_is_tight() {
        let point = Tensor::row(vec![1.0, 2.0]);
        let analytic = Tensor::row(vec![2.0, 4.0]);
        let err = finite_diff_check(
            |x| Ok(x.data().iter().map(|v| v * v).sum()),
            &analytic,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn finite_diff_cross_entropy_of_softmax() {
        let logits = random_tensor(4, 5, "fd-ce");
        let labels = vec![0usize, 3, 2, 1];
        let eval = |x: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), false);
            let p = g.softmax(v);
            let py = g.select_cols(p, &labels)?;
            let lp = g.ln(py);
            let s = g.sum_all(lp);
            let loss = g.scale(s, -1.0);
            g.value(loss).scalar_value()
        };
        let mut g = Graph::new();
        let v = g.leaf(logits.clone(), true);
        let p = g.softmax(v);
        let py = g.select_cols(p, &labels).unwrap();
        let lp = g.ln(py);
        let s = g.sum_all(lp);
        let loss = g.scale(s, -1.0);
        let grads = g.backward(loss).unwrap();
        let err = finite_diff_check(eval, grads.get(v).unwrap(), &logits, 1e-5).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn finite_diff_all_primitives_composite() {
        // One expression exercising matmul, add (broadcast), mul, relu, exp,
        // ln, xlogx, tanh, softmax, norms, div, concat, row, remove_col,
        // select_cols, transpose, det, inv, sums.
        let a0 = random_tensor(3, 4, "fd-a");
        let build = |g: &mut Graph, a: Var| -> Result<Var> {
            let w = g.constant(random_tensor(4, 4, "fd-w"));
            let b = g.constant(random_tensor(1, 4, "fd-b"));
            let mm = g.matmul(a, w)?;
            let biased = g.add(mm, b)?;
            let r = g.relu(biased);
            let e = g.exp(r);
            let sm = g.softmax(e);
            let xl = g.xlogx(sm);
            let th = g.tanh(xl);
            let lift = g.constant(Tensor::filled(3, 4, 1.5));
            let shifted = g.add(th, lift)?;
            let norms = g.l2_norm_rows(shifted);
            let unit = g.div_cols(shifted, norms)?;
            let cut = g.remove_col(unit, 1)?;
            let r0 = g.row(cut, 0)?;
            let r1 = g.row(cut, 2)?;
            let two = g.concat_rows(&[r0, r1])?;
            let twot = g.transpose(two);
            let gram = g.matmul(two, twot)?;
            let eps = g.constant(Tensor::scaled_identity(2, 1e-9));
            let gram_off = g.add(gram, eps)?;
            let dt = g.det(gram_off)?;
            let ldt = g.ln(dt);
            let iv = g.inv(gram_off)?;
            let ivsum = g.sum_all(iv);
            let sel = g.select_cols(sm, &[0, 2, 3])?;
            let lsel = g.ln(sel);
            let selsum = g.sum_all(lsel);
            let cols = g.sum_cols(sm);
            let rows = g.sum_rows(th);
            let colsum = g.sum_all(cols);
            let rowsum = g.sum_all(rows);
            let mut total = g.add(ldt, ivsum)?;
            total = g.add(total, selsum)?;
            total = g.add(total, colsum)?;
            let scaled = g.scale(rowsum, 0.25);
            total = g.sub(total, scaled)?;
            let diff = g.sub(colsum, rowsum)?;
            let prod = g.mul(diff, diff)?;
            g.add(total, prod)
        };
        let eval = |x: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let a = g.leaf(x.clone(), false);
            let out = build(&mut g, a)?;
            g.value(out).scalar_value()
        };
        let mut g = Graph::new();
        let a = g.leaf(a0.clone(), true);
        let out = build(&mut g, a).unwrap();
        let grads = g.backward(out).unwrap();
        let err = finite_diff_check(eval, grads.get(a).unwrap(), &a0, 1e-6).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let x0 = random_tensor(5, 6, "det-run");
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let sm = g.softmax(x);
            let xl = g.xlogx(sm);
            let s = g.sum_all(xl);
            let loss = g.scale(s, -1.0);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).data().to_vec(),
                grads.get(x).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2), true);
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatches_name_the_op() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3), false);
        let b = g.leaf(Tensor::zeros(2, 3), false);
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
        let c = g.leaf(Tensor::zeros(2, 3), false);
        assert!(g.det(c).is_err());
    }
}

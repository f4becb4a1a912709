//! Reverse-mode differentiation over dense 64-bit matrices.
//!
//! A `Tape` is a Wengert list: every primitive appends one node holding the
//! forward value and enough state to play its vector-Jacobian product
//! backwards. Nodes are created in topological order, so `backward` is a
//! single reverse sweep with additive fan-out accumulation.
//!
//! Scalars are 1x1 matrices; there is no broadcasting beyond the explicit
//! row/column/scalar variants below. Non-finite forward values are reported
//! as `DiffError::NumericFault` instead of propagating silently.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use thiserror::Error;

use super::sparse::SparseMatrix;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: non-finite value in output")]
    NumericFault { op: &'static str },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("loss does not depend on any differentiable leaf")]
    NoGradPath,
    #[error("index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds { index: usize, rows: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Per-call batch statistics captured by training-mode batch normalization,
/// keyed so the owner can fold them into running statistics.
#[derive(Clone, Debug)]
pub struct BnBatchStat {
    pub key: String,
    pub mean: Array2<f64>,
    pub var_unbiased: Array2<f64>,
}

enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, ta: bool, tb: bool },
    SparseMatMul { m: Arc<SparseMatrix>, x: TensorId, transpose: bool },
    Add { a: TensorId, b: TensorId },
    AddRowBroadcast { a: TensorId, row: TensorId },
    Scale { a: TensorId, c: f64 },
    MulScalar { a: TensorId, s: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulColBroadcast { a: TensorId, col: TensorId },
    Relu { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    RowSoftmax { a: TensorId },
    LogSumExpRow { a: TensorId },
    SubColBroadcast { a: TensorId, col: TensorId },
    Transpose { a: TensorId },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    GatherRows { a: TensorId, idx: Arc<Vec<usize>> },
    ScatterAddRows { a: TensorId, idx: Arc<Vec<usize>> },
    ReduceSum { a: TensorId },
    Dropout { a: TensorId, mask: Arc<Array2<f64>> },
    BatchNormTrain { x: TensorId, gamma: TensorId, beta: TensorId, x_hat: Array2<f64>, inv_std: Array2<f64> },
    BatchNormEval { x: TensorId, gamma: TensorId, beta: TensorId, x_hat: Array2<f64>, inv_std: Array2<f64> },
    Reshape { a: TensorId },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
    bn_stats: Vec<BnBatchStat>,
}

fn ensure_finite(op: &'static str, v: &Array2<f64>) -> Result<(), DiffError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NumericFault { op })
    }
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

    pub fn value(&self, t: TensorId) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    /// Gradient accumulated for `t` by the last `backward` call.
    pub fn grad(&self, t: TensorId) -> Option<&Array2<f64>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    /// Batch-norm statistics recorded since the last drain.
    pub fn take_bn_stats(&mut self) -> Vec<BnBatchStat> {
        std::mem::take(&mut self.bn_stats)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// A leaf that never accumulates gradient (inputs, adjacency, targets).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf; `grad` is populated by `backward`.
    pub fn param(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    // -- primitives ---------------------------------------------------------

    pub fn matmul_opts(
        &mut self,
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
    ) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, _n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: (m, k1), rhs: (k2, _n) });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        ensure_finite("matmul", &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.matmul_opts(a, b, false, false)
    }

    /// `a . b^T`
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.matmul_opts(a, b, false, true)
    }

    /// `a^T . b`
    pub fn matmul_tn(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.matmul_opts(a, b, true, false)
    }

    pub fn sparse_matmul(
        &mut self,
        m: &Arc<SparseMatrix>,
        x: TensorId,
        transpose: bool,
    ) -> Result<TensorId, DiffError> {
        let (xr, xc) = self.shape(x);
        let expect = if transpose { m.n_rows() } else { m.n_cols() };
        if xr != expect {
            return Err(DiffError::ShapeMismatch { op: "sparse_matmul", lhs: (expect, 0), rhs: (xr, xc) });
        }
        let value = m.matmul(&self.nodes[x.0].value.view(), transpose);
        ensure_finite("sparse_matmul", &value)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SparseMatMul { m: Arc::clone(m), x, transpose }, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch { op: "add", lhs: self.shape(a), rhs: self.shape(b) });
        }
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        ensure_finite("add", &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// `a - b`, composed from the add/scale primitives.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Add a `1 x m` row vector to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, DiffError> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(DiffError::ShapeMismatch { op: "add_row_broadcast", lhs: self.shape(a), rhs: (rr, rc) });
        }
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        ensure_finite("add_row_broadcast", &value)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRowBroadcast { a, row }, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, DiffError> {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        ensure_finite("scale", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale { a, c }, rg))
    }

    /// Multiply every entry of `a` by the 1x1 tensor `s`.
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, DiffError> {
        if self.shape(s) != (1, 1) {
            return Err(DiffError::ShapeMismatch { op: "mul_scalar", lhs: (1, 1), rhs: self.shape(s) });
        }
        let sv = self.nodes[s.0].value[[0, 0]];
        let value = self.nodes[a.0].value.mapv(|x| x * sv);
        ensure_finite("mul_scalar", &value)?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::MulScalar { a, s }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch { op: "mul", lhs: self.shape(a), rhs: self.shape(b) });
        }
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        ensure_finite("mul", &value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Multiply row r of `a` by `col[r, 0]`.
    pub fn mul_col_broadcast(&mut self, a: TensorId, col: TensorId) -> Result<TensorId, DiffError> {
        let (ar, _) = self.shape(a);
        let (cr, cc) = self.shape(col);
        if cr != ar || cc != 1 {
            return Err(DiffError::ShapeMismatch { op: "mul_col_broadcast", lhs: self.shape(a), rhs: (cr, cc) });
        }
        let value = &self.nodes[a.0].value * &self.nodes[col.0].value;
        ensure_finite("mul_col_broadcast", &value)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulColBroadcast { a, col }, rg))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        // f64::max would launder NaN inputs into 0, so rectify explicitly.
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else if x.is_nan() { f64::NAN } else { 0.0 });
        ensure_finite("relu", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Relu { a }, rg))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        ensure_finite("exp", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Exp { a }, rg))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        ensure_finite("log", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Log { a }, rg))
    }

    /// Numerically stable per-row softmax.
    pub fn row_softmax(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        ensure_finite("row_softmax", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowSoftmax { a }, rg))
    }

    /// Per-row log(sum(exp(x))) as an `n x 1` column.
    pub fn logsumexp_row(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros((x.nrows(), 1));
        for (r, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            value[[r, 0]] = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        }
        ensure_finite("logsumexp_row", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSumExpRow { a }, rg))
    }

    /// Subtract `col[r, 0]` from every entry of row r.
    pub fn sub_col_broadcast(&mut self, a: TensorId, col: TensorId) -> Result<TensorId, DiffError> {
        let (ar, _) = self.shape(a);
        let (cr, cc) = self.shape(col);
        if cr != ar || cc != 1 {
            return Err(DiffError::ShapeMismatch { op: "sub_col_broadcast", lhs: self.shape(a), rhs: (cr, cc) });
        }
        let value = &self.nodes[a.0].value - &self.nodes[col.0].value;
        ensure_finite("sub_col_broadcast", &value)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::SubColBroadcast { a, col }, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, DiffError> {
        let rows = self.shape(parts[0]).0;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(DiffError::ShapeMismatch { op: "concat_cols", lhs: (rows, 0), rhs: (r, c) });
            }
            width += c;
        }
        let mut value = Array2::zeros((rows, width));
        let mut at = 0;
        for &p in parts {
            let c = self.shape(p).1;
            value
                .slice_mut(ndarray::s![.., at..at + c])
                .assign(&self.nodes[p.0].value);
            at += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, DiffError> {
        let cols = self.shape(parts[0]).1;
        let mut height = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(DiffError::ShapeMismatch { op: "concat_rows", lhs: (0, cols), rhs: (r, c) });
            }
            height += r;
        }
        let mut value = Array2::zeros((height, cols));
        let mut at = 0;
        for &p in parts {
            let r = self.shape(p).0;
            value
                .slice_mut(ndarray::s![at..at + r, ..])
                .assign(&self.nodes[p.0].value);
            at += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// `y[r, :] = a[idx[r], :]`
    pub fn gather_rows(&mut self, a: TensorId, idx: Arc<Vec<usize>>) -> Result<TensorId, DiffError> {
        let (rows, cols) = self.shape(a);
        let mut value = Array2::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(DiffError::IndexOutOfBounds { index: i, rows });
            }
            value.row_mut(r).assign(&self.nodes[a.0].value.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows { a, idx }, rg))
    }

    /// `y[idx[r], :] += a[r, :]` into a zero matrix with `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: TensorId,
        idx: Arc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<TensorId, DiffError> {
        let (rows, cols) = self.shape(a);
        if idx.len() != rows {
            return Err(DiffError::ShapeMismatch { op: "scatter_add_rows", lhs: (rows, cols), rhs: (idx.len(), 0) });
        }
        let mut value = Array2::zeros((out_rows, cols));
        for (r, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(DiffError::IndexOutOfBounds { index: i, rows: out_rows });
            }
            let src = self.nodes[a.0].value.row(r);
            let mut dst = value.row_mut(i);
            dst += &src;
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScatterAddRows { a, idx }, rg))
    }

    pub fn reduce_sum(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let s = self.nodes[a.0].value.sum();
        let value = Array2::from_elem((1, 1), s);
        ensure_finite("reduce_sum", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::ReduceSum { a }, rg))
    }

    /// Elementwise multiply by a pre-sampled (inverted, already rescaled)
    /// dropout mask, so forward passes replay exactly.
    pub fn dropout(&mut self, a: TensorId, mask: Arc<Array2<f64>>) -> Result<TensorId, DiffError> {
        if self.shape(a) != mask.dim() {
            return Err(DiffError::ShapeMismatch { op: "dropout", lhs: self.shape(a), rhs: mask.dim() });
        }
        let value = &self.nodes[a.0].value * &*mask;
        ensure_finite("dropout", &value)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.shape(a);
        if ar * ac != rows * cols {
            return Err(DiffError::ShapeMismatch { op: "reshape", lhs: (ar, ac), rhs: (rows, cols) });
        }
        let flat: Vec<f64> = self.nodes[a.0].value.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("checked size");
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    fn batch_norm_common(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &Array2<f64>,
        var: &Array2<f64>,
        eps: f64,
        train: bool,
    ) -> Result<TensorId, DiffError> {
        let (_, f) = self.shape(x);
        for p in [gamma, beta] {
            let s = self.shape(p);
            if s != (1, f) {
                return Err(DiffError::ShapeMismatch { op: "batch_norm", lhs: (1, f), rhs: s });
            }
        }
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let x_hat = (&self.nodes[x.0].value - mean) * &inv_std;
        let value = &x_hat * &self.nodes[gamma.0].value + &self.nodes[beta.0].value;
        ensure_finite("batch_norm", &value)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = if train {
            Op::BatchNormTrain { x, gamma, beta, x_hat, inv_std }
        } else {
            Op::BatchNormEval { x, gamma, beta, x_hat, inv_std }
        };
        Ok(self.push(value, op, rg))
    }

    /// Batch normalization over the row (node) dimension using batch
    /// statistics; records the batch mean/var under `stat_key` for running
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        stat_key: &str,
    ) -> Result<TensorId, DiffError> {
        let xv = &self.nodes[x.0].value;
        let n = xv.nrows();
        let mean = xv.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let var = (xv - &mean).mapv(|d| d * d).mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let bessel = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        self.bn_stats.push(BnBatchStat {
            key: stat_key.to_string(),
            mean: mean.clone(),
            var_unbiased: var.mapv(|v| v * bessel),
        });
        self.batch_norm_common(x, gamma, beta, &mean, &var, eps, true)
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        running_mean: &Array2<f64>,
        running_var: &Array2<f64>,
    ) -> Result<TensorId, DiffError> {
        self.batch_norm_common(x, gamma, beta, running_mean, running_var, eps, false)
    }

    // -- composites ---------------------------------------------------------

    /// Negative log-likelihood `-sum_r log_probs[r, cols[r]]` from an already
    /// log-normalized matrix.
    pub fn nll_from_log_probs(
        &mut self,
        log_probs: TensorId,
        cols: &[usize],
    ) -> Result<TensorId, DiffError> {
        let (rows, width) = self.shape(log_probs);
        if cols.len() != rows {
            return Err(DiffError::ShapeMismatch { op: "nll", lhs: (rows, 0), rhs: (cols.len(), 0) });
        }
        let flat_idx: Vec<usize> = cols.iter().enumerate().map(|(r, &c)| r * width + c).collect();
        let flat = self.reshape(log_probs, rows * width, 1)?;
        let picked = self.gather_rows(flat, Arc::new(flat_idx))?;
        let total = self.reduce_sum(picked)?;
        self.scale(total, -1.0)
    }

    // -- backward -----------------------------------------------------------

    fn accumulate(&mut self, t: TensorId, delta: Array2<f64>) {
        match &mut self.grads[t.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss; gradients of every node that
    /// requires grad become available through `grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), DiffError> {
        if self.shape(loss) != (1, 1) {
            return Err(DiffError::NonScalarLoss(self.shape(loss)));
        }
        if !self.rg(loss) {
            return Err(DiffError::NoGradPath);
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            match &self.nodes[i].op {
                // Only leaf gradients survive the sweep; interior gradients
                // are consumed as soon as their node is processed.
                Op::Leaf => {
                    self.grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if self.rg(a) {
                        let bv = &self.nodes[b.0].value;
                        let da = match (ta, tb) {
                            (false, false) => g.dot(&bv.t()),
                            (false, true) => g.dot(bv),
                            (true, false) => bv.dot(&g.t()),
                            (true, true) => bv.t().dot(&g.t()),
                        };
                        self.accumulate(a, da);
                    }
                    if self.rg(b) {
                        let av = &self.nodes[a.0].value;
                        let db = match (ta, tb) {
                            (false, false) => av.t().dot(&g),
                            (true, false) => av.dot(&g),
                            (false, true) => g.t().dot(av),
                            (true, true) => g.t().dot(&av.t()),
                        };
                        self.accumulate(b, db);
                    }
                }
                Op::SparseMatMul { m, x, transpose } => {
                    let (m, x, transpose) = (Arc::clone(m), *x, *transpose);
                    if self.rg(x) {
                        let dx = m.matmul(&g.view(), !transpose);
                        self.accumulate(x, dx);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.rg(b) {
                        self.accumulate(b, g.clone());
                    }
                }
                Op::AddRowBroadcast { a, row } => {
                    let (a, row) = (*a, *row);
                    if self.rg(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.rg(row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(row, dr);
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    if self.rg(a) {
                        self.accumulate(a, g.mapv(|v| v * c));
                    }
                }
                Op::MulScalar { a, s } => {
                    let (a, s) = (*a, *s);
                    let sv = self.nodes[s.0].value[[0, 0]];
                    if self.rg(a) {
                        self.accumulate(a, g.mapv(|v| v * sv));
                    }
                    if self.rg(s) {
                        let ds = (&g * &self.nodes[a.0].value).sum();
                        self.accumulate(s, Array2::from_elem((1, 1), ds));
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let da = &g * &self.nodes[b.0].value;
                        self.accumulate(a, da);
                    }
                    if self.rg(b) {
                        let db = &g * &self.nodes[a.0].value;
                        self.accumulate(b, db);
                    }
                }
                Op::MulColBroadcast { a, col } => {
                    let (a, col) = (*a, *col);
                    if self.rg(a) {
                        let da = &g * &self.nodes[col.0].value;
                        self.accumulate(a, da);
                    }
                    if self.rg(col) {
                        let dc = (&g * &self.nodes[a.0].value)
                            .sum_axis(Axis(1))
                            .insert_axis(Axis(1));
                        self.accumulate(col, dc);
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let da = ndarray::Zip::from(&g)
                            .and(&self.nodes[i].value)
                            .map_collect(|&gv, &y| if y > 0.0 { gv } else { 0.0 });
                        self.accumulate(a, da);
                    }
                }
                Op::Exp { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let da = &g * &self.nodes[i].value;
                        self.accumulate(a, da);
                    }
                }
                Op::Log { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let da = &g / &self.nodes[a.0].value;
                        self.accumulate(a, da);
                    }
                }
                Op::RowSoftmax { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let y = &self.nodes[i].value;
                        let mut da = Array2::zeros(g.dim());
                        for r in 0..g.nrows() {
                            let gr = g.row(r);
                            let yr = y.row(r);
                            let dot: f64 = gr.iter().zip(yr.iter()).map(|(&gv, &yv)| gv * yv).sum();
                            let mut dr = da.row_mut(r);
                            for c in 0..gr.len() {
                                dr[c] = (gr[c] - dot) * yr[c];
                            }
                        }
                        self.accumulate(a, da);
                    }
                }
                Op::LogSumExpRow { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let x = &self.nodes[a.0].value;
                        let y = &self.nodes[i].value;
                        let mut da = Array2::zeros(x.dim());
                        for r in 0..x.nrows() {
                            let gr = g[[r, 0]];
                            let yr = y[[r, 0]];
                            let mut dr = da.row_mut(r);
                            for (c, &xv) in x.row(r).iter().enumerate() {
                                dr[c] = gr * (xv - yr).exp();
                            }
                        }
                        self.accumulate(a, da);
                    }
                }
                Op::SubColBroadcast { a, col } => {
                    let (a, col) = (*a, *col);
                    if self.rg(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.rg(col) {
                        let dc = g.sum_axis(Axis(1)).insert_axis(Axis(1)).mapv(|v| -v);
                        self.accumulate(col, dc);
                    }
                }
                Op::Transpose { a } => {
                    let a = *a;
                    if self.rg(a) {
                        self.accumulate(a, g.t().to_owned());
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let c = self.shape(p).1;
                        if self.rg(p) {
                            let dp = g.slice(ndarray::s![.., at..at + c]).to_owned();
                            self.accumulate(p, dp);
                        }
                        at += c;
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let r = self.shape(p).0;
                        if self.rg(p) {
                            let dp = g.slice(ndarray::s![at..at + r, ..]).to_owned();
                            self.accumulate(p, dp);
                        }
                        at += r;
                    }
                }
                Op::GatherRows { a, idx } => {
                    let (a, idx) = (*a, Arc::clone(idx));
                    if self.rg(a) {
                        let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                        for (r, &src) in idx.iter().enumerate() {
                            let mut dst = da.row_mut(src);
                            dst += &g.row(r);
                        }
                        self.accumulate(a, da);
                    }
                }
                Op::ScatterAddRows { a, idx } => {
                    let (a, idx) = (*a, Arc::clone(idx));
                    if self.rg(a) {
                        let cols = g.ncols();
                        let mut da = Array2::zeros((idx.len(), cols));
                        for (r, &dst) in idx.iter().enumerate() {
                            da.row_mut(r).assign(&g.row(dst));
                        }
                        self.accumulate(a, da);
                    }
                }
                Op::ReduceSum { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let da = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                        self.accumulate(a, da);
                    }
                }
                Op::Dropout { a, mask } => {
                    let (a, mask) = (*a, Arc::clone(mask));
                    if self.rg(a) {
                        self.accumulate(a, &g * &*mask);
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, x_hat, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let x_hat = x_hat.clone();
                    let inv_std = inv_std.clone();
                    if self.rg(gamma) {
                        let dg = (&g * &x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(gamma, dg);
                    }
                    if self.rg(beta) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(beta, db);
                    }
                    if self.rg(x) {
                        let n = g.nrows() as f64;
                        let gmean = g.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
                        let gxmean = (&g * &x_hat).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
                        let coeff = &self.nodes[gamma.0].value * &inv_std;
                        let dx = (&g - &gmean - &(&x_hat * &gxmean)) * &coeff;
                        self.accumulate(x, dx);
                    }
                }
                Op::BatchNormEval { x, gamma, beta, x_hat, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let x_hat = x_hat.clone();
                    let inv_std = inv_std.clone();
                    if self.rg(gamma) {
                        let dg = (&g * &x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(gamma, dg);
                    }
                    if self.rg(beta) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(beta, db);
                    }
                    if self.rg(x) {
                        let coeff = &self.nodes[gamma.0].value * &inv_std;
                        self.accumulate(x, &g * &coeff);
                    }
                }
                Op::Reshape { a } => {
                    let a = *a;
                    if self.rg(a) {
                        let dim = self.nodes[a.0].value.dim();
                        let flat: Vec<f64> = g.iter().copied().collect();
                        self.accumulate(a, Array2::from_shape_vec(dim, flat).expect("same size"));
                    }
                }
            }
        }
        Ok(())
    }
}

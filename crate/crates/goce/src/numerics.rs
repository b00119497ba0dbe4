//! Dense 2-D tensor arithmetic with a reverse-mode tape.
//!
//! Every value is a row-major `rows x cols` matrix of f64; scalars are 1x1.
//! Ops record themselves on the owning [`Tape`] so a single `backward` call
//! produces gradients for every leaf that asked for them. Masking is additive
//! `-inf` before softmax, which keeps masked positions at exactly zero in both
//! the output and its gradient.

use crate::error::{GoceError, Result};

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddConst(TensorId),
    ScalarMul(TensorId, TensorId),
    MulColBroadcast(TensorId, TensorId),
    AddRowBias(TensorId, TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    SoftmaxRows(TensorId),
    LogSumExpRows(TensorId),
    Gather(TensorId, Vec<(usize, usize)>),
    Row(TensorId, usize),
    Cols(TensorId, usize, usize),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    Sum(TensorId),
    Mean(TensorId),
    Abs(TensorId),
    Clamp01St(TensorId),
    KlRows(TensorId, TensorId),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Largest p-mass that may sit on a zero-probability q entry before the KL
/// divergence reports a support violation instead of ignoring the term.
pub const KL_SUPPORT_EPS: f64 = 1e-12;

/// Reverse-mode tape. One tape per forward pass; never shared mutably.
#[derive(Debug, Default)]
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

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: vec![0.0; rows * cols],
            requires_grad,
            op,
        });
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].grad
    }

    /// New leaf that participates in gradient computation.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> TensorId {
        self.push(rows, cols, data, true, Op::Leaf)
    }

    /// New leaf treated as data; no gradient flows into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> TensorId {
        self.push(rows, cols, data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(1, 1, vec![v])
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(GoceError::ShapeMismatch {
                op: "matmul",
                lhs: (m, ka),
                rhs: (kb, n),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (&self.nodes[a].data, &self.nodes[b].data);
            for i in 0..m {
                for k in 0..ka {
                    let aik = da[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += aik * db[k * n + j];
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.nodes[a].data[i * n + j];
            }
        }
        let rg = self.nodes[a].requires_grad;
        self.push(n, m, out, rg, Op::Transpose(a))
    }

    fn elementwise2(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(GoceError::ShapeMismatch {
                op: op_name,
                lhs: (m, n),
                rhs: self.shape(b),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(m, n, out, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x * c).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(m, n, out, rg, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x + c).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(m, n, out, rg, Op::AddConst(a))
    }

    /// Scalar tape node times tensor tape node.
    pub fn scalar_mul(&mut self, s: TensorId, a: TensorId) -> Result<TensorId> {
        if self.shape(s) != (1, 1) {
            return Err(GoceError::ShapeMismatch {
                op: "scalar_mul",
                lhs: self.shape(s),
                rhs: self.shape(a),
            });
        }
        let sv = self.nodes[s].data[0];
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| sv * x).collect();
        let rg = self.any_grad(&[s, a]);
        Ok(self.push(m, n, out, rg, Op::ScalarMul(s, a)))
    }

    /// `out[i][j] = a[i][j] * c[i]` with `c` an m x 1 column.
    pub fn mul_col_broadcast(&mut self, a: TensorId, c: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if self.shape(c) != (m, 1) {
            return Err(GoceError::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: (m, n),
                rhs: self.shape(c),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ci = self.nodes[c].data[i];
            for j in 0..n {
                out[i * n + j] = self.nodes[a].data[i * n + j] * ci;
            }
        }
        let rg = self.any_grad(&[a, c]);
        Ok(self.push(m, n, out, rg, Op::MulColBroadcast(a, c)))
    }

    /// `out[i][j] = a[i][j] + b[0][j]` with `b` a 1 x n row bias.
    pub fn add_row_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (1, n) {
            return Err(GoceError::ShapeMismatch {
                op: "add_row_bias",
                lhs: (m, n),
                rhs: self.shape(b),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = self.nodes[a].data[i * n + j] + self.nodes[b].data[j];
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::AddRowBias(a, b)))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| sigmoid_scalar(x)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(m, n, out, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(m, n, out, rg, Op::Tanh(a))
    }

    /// Row-wise softmax with max-subtraction. `-inf` entries map to exactly 0;
    /// a row with no finite entry is an error.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a].data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(GoceError::DegenerateRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..n {
                let e = if row[j] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (row[j] - mx).exp()
                };
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(m, n, out, rg, Op::SoftmaxRows(a)))
    }

    /// Row-wise log-sum-exp, returns m x 1.
    pub fn logsumexp_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.nodes[a].data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(GoceError::DegenerateRow { row: i });
            }
            let s: f64 = row
                .iter()
                .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - mx).exp() })
                .sum();
            out[i] = mx + s.ln();
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(m, 1, out, rg, Op::LogSumExpRows(a)))
    }

    /// Picks the listed (row, col) entries into a k x 1 column.
    pub fn gather(&mut self, a: TensorId, idx: Vec<(usize, usize)>) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in &idx {
            if r >= m || c >= n {
                return Err(GoceError::IndexOutOfRange {
                    index: r * n + c,
                    len: m * n,
                });
            }
            out.push(self.nodes[a].data[r * n + c]);
        }
        let k = idx.len();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(k, 1, out, rg, Op::Gather(a, idx)))
    }

    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if i >= m {
            return Err(GoceError::IndexOutOfRange { index: i, len: m });
        }
        let out = self.nodes[a].data[i * n..(i + 1) * n].to_vec();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(1, n, out, rg, Op::Row(a, i)))
    }

    /// Contiguous column block `[start, start+len)` of `a`.
    pub fn cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(GoceError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            for j in 0..len {
                out[i * len + j] = self.nodes[a].data[i * n + start + j];
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(m, len, out, rg, Op::Cols(a, start, len)))
    }

    pub fn concat_rows(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        assert!(!ids.is_empty());
        let (_, n) = self.shape(ids[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in ids {
            let (r, c) = self.shape(id);
            if c != n {
                return Err(GoceError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, n),
                    rhs: (r, c),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[id].data);
        }
        let rg = self.any_grad(ids);
        Ok(self.push(rows, n, data, rg, Op::ConcatRows(ids.to_vec())))
    }

    pub fn concat_cols(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        assert!(!ids.is_empty());
        let (m, _) = self.shape(ids[0]);
        let widths: Vec<usize> = ids.iter().map(|&id| self.shape(id).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (bi, &id) in ids.iter().enumerate() {
            let (r, c) = self.shape(id);
            if r != m {
                return Err(GoceError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (m, total),
                    rhs: (r, c),
                });
            }
            for i in 0..m {
                for j in 0..c {
                    data[i * total + off + j] = self.nodes[id].data[i * c + j];
                }
            }
            off += widths[bi];
        }
        let rg = self.any_grad(ids);
        Ok(self.push(m, total, data, rg, Op::ConcatCols(ids.to_vec())))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].data.iter().sum();
        let rg = self.nodes[a].requires_grad;
        self.push(1, 1, vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let len = self.nodes[a].data.len() as f64;
        let s: f64 = self.nodes[a].data.iter().sum::<f64>() / len;
        let rg = self.nodes[a].requires_grad;
        self.push(1, 1, vec![s], rg, Op::Mean(a))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.abs()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(m, n, out, rg, Op::Abs(a))
    }

    /// Clamp to [0, 1] with a straight-through backward (gradient passes
    /// unchanged at the boundary).
    pub fn clamp01_st(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(m, n, out, rg, Op::Clamp01St(a))
    }

    /// Mean over rows of sum_j p ln(p/q), with 0*ln(0) := 0. Errors where
    /// p > 0 but q == 0.
    pub fn kl_divergence_rows(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(p);
        if self.shape(q) != (m, n) {
            return Err(GoceError::ShapeMismatch {
                op: "kl_divergence_rows",
                lhs: (m, n),
                rhs: self.shape(q),
            });
        }
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..n {
                let pv = self.nodes[p].data[i * n + j];
                let qv = self.nodes[q].data[i * n + j];
                if pv > 0.0 {
                    if qv <= 0.0 {
                        // softmax tails can underflow to exact 0; a vanishing
                        // p mass contributes ~0 to the divergence, so only a
                        // non-negligible p on empty q support is an error
                        if pv > KL_SUPPORT_EPS {
                            return Err(GoceError::SupportViolation {
                                row: i,
                                col: j,
                                p: pv,
                                q: qv,
                            });
                        }
                        continue;
                    }
                    total += pv * (pv / qv).ln();
                }
            }
        }
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(1, 1, vec![total / m as f64], rg, Op::KlRows(p, q)))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate in each node;
    /// read leaves back with [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(GoceError::NonScalarLoss { rows: r, cols: c });
        }
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss].grad[0] = 1.0;
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(a);
                    let (_, n) = self.shape(b);
                    // dA += G * B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += self.nodes[id].grad[i * n + j] * self.nodes[b].data[kk * n + j];
                            }
                            self.nodes[a].grad[i * k + kk] += acc;
                        }
                    }
                    // dB += A^T * G
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += self.nodes[a].data[i * k + kk] * self.nodes[id].grad[i * n + j];
                            }
                            self.nodes[b].grad[kk * n + j] += acc;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.shape(a);
                    for i in 0..m {
                        for j in 0..n {
                            self.nodes[a].grad[i * n + j] += self.nodes[id].grad[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(a, id, 1.0);
                    self.accumulate(b, id, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, id, 1.0);
                    self.accumulate(b, id, -1.0);
                }
                Op::Mul(a, b) => {
                    for i in 0..self.nodes[id].grad.len() {
                        let g = self.nodes[id].grad[i];
                        let av = self.nodes[a].data[i];
                        let bv = self.nodes[b].data[i];
                        self.nodes[a].grad[i] += g * bv;
                        self.nodes[b].grad[i] += g * av;
                    }
                }
                Op::Scale(a, cst) => self.accumulate(a, id, cst),
                Op::AddConst(a) => self.accumulate(a, id, 1.0),
                Op::ScalarMul(s, a) => {
                    let sv = self.nodes[s].data[0];
                    let mut ds = 0.0;
                    for i in 0..self.nodes[id].grad.len() {
                        let g = self.nodes[id].grad[i];
                        ds += g * self.nodes[a].data[i];
                        self.nodes[a].grad[i] += g * sv;
                    }
                    self.nodes[s].grad[0] += ds;
                }
                Op::MulColBroadcast(a, cid) => {
                    let (m, n) = self.shape(a);
                    for i in 0..m {
                        let cv = self.nodes[cid].data[i];
                        let mut dc = 0.0;
                        for j in 0..n {
                            let g = self.nodes[id].grad[i * n + j];
                            dc += g * self.nodes[a].data[i * n + j];
                            self.nodes[a].grad[i * n + j] += g * cv;
                        }
                        self.nodes[cid].grad[i] += dc;
                    }
                }
                Op::AddRowBias(a, b) => {
                    let (m, n) = self.shape(a);
                    for i in 0..m {
                        for j in 0..n {
                            let g = self.nodes[id].grad[i * n + j];
                            self.nodes[a].grad[i * n + j] += g;
                            self.nodes[b].grad[j] += g;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for i in 0..self.nodes[id].grad.len() {
                        let y = self.nodes[id].data[i];
                        self.nodes[a].grad[i] += self.nodes[id].grad[i] * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for i in 0..self.nodes[id].grad.len() {
                        let y = self.nodes[id].data[i];
                        self.nodes[a].grad[i] += self.nodes[id].grad[i] * (1.0 - y * y);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = self.shape(a);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += self.nodes[id].grad[i * n + j] * self.nodes[id].data[i * n + j];
                        }
                        for j in 0..n {
                            let y = self.nodes[id].data[i * n + j];
                            self.nodes[a].grad[i * n + j] +=
                                y * (self.nodes[id].grad[i * n + j] - dot);
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let (m, n) = self.shape(a);
                    for i in 0..m {
                        let g = self.nodes[id].grad[i];
                        let lse = self.nodes[id].data[i];
                        for j in 0..n {
                            let x = self.nodes[a].data[i * n + j];
                            if x != f64::NEG_INFINITY {
                                self.nodes[a].grad[i * n + j] += g * (x - lse).exp();
                            }
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let (_, n) = self.shape(a);
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        self.nodes[a].grad[r * n + c] += self.nodes[id].grad[k];
                    }
                }
                Op::Row(a, i) => {
                    let (_, n) = self.shape(a);
                    for j in 0..n {
                        self.nodes[a].grad[i * n + j] += self.nodes[id].grad[j];
                    }
                }
                Op::Cols(a, start, len) => {
                    let (m, n) = self.shape(a);
                    for i in 0..m {
                        for j in 0..len {
                            self.nodes[a].grad[i * n + start + j] += self.nodes[id].grad[i * len + j];
                        }
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut off = 0;
                    for aid in ids {
                        let len = self.nodes[aid].data.len();
                        for k in 0..len {
                            self.nodes[aid].grad[k] += self.nodes[id].grad[off + k];
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(ids) => {
                    let (m, total) = self.shape(id);
                    let mut off = 0;
                    for aid in ids {
                        let (_, c) = self.shape(aid);
                        for i in 0..m {
                            for j in 0..c {
                                self.nodes[aid].grad[i * c + j] +=
                                    self.nodes[id].grad[i * total + off + j];
                            }
                        }
                        off += c;
                    }
                }
                Op::Sum(a) => {
                    let g = self.nodes[id].grad[0];
                    for v in self.nodes[a].grad.iter_mut() {
                        *v += g;
                    }
                }
                Op::Mean(a) => {
                    let g = self.nodes[id].grad[0] / self.nodes[a].data.len() as f64;
                    for v in self.nodes[a].grad.iter_mut() {
                        *v += g;
                    }
                }
                Op::Abs(a) => {
                    for i in 0..self.nodes[id].grad.len() {
                        let s = self.nodes[a].data[i].signum();
                        let s = if self.nodes[a].data[i] == 0.0 { 0.0 } else { s };
                        self.nodes[a].grad[i] += self.nodes[id].grad[i] * s;
                    }
                }
                Op::Clamp01St(a) => self.accumulate(a, id, 1.0),
                Op::KlRows(p, q) => {
                    let (m, n) = self.shape(p);
                    let g = self.nodes[id].grad[0] / m as f64;
                    for i in 0..m * n {
                        let pv = self.nodes[p].data[i];
                        let qv = self.nodes[q].data[i];
                        if pv > 0.0 && qv > 0.0 {
                            self.nodes[p].grad[i] += g * ((pv / qv).ln() + 1.0);
                            self.nodes[q].grad[i] += -g * pv / qv;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, from: TensorId, factor: f64) {
        debug_assert_eq!(self.nodes[target].grad.len(), self.nodes[from].grad.len());
        for i in 0..self.nodes[from].grad.len() {
            let g = self.nodes[from].grad[i] * factor;
            self.nodes[target].grad[i] += g;
        }
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-finite-difference gradient of a scalar function, h = 1e-5.
/// Testing oracle; intentionally independent of the tape.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        grad[i] = (up - dn) / (2.0 * h);
    }
    grad
}

/// Max relative error between two gradient vectors, with an absolute floor so
/// near-zero entries compare on absolute terms.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs()).max(1e-3);
            (x - y).abs() / denom
        })
        .fold(0.0, f64::max)
}

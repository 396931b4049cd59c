//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every forward call appends a node; `backward` replays the list in reverse.
//! The op set is intentionally closed: matrix multiply, add (plain and row
//! broadcast), row gather/concat/slice, transpose, masked row softmax,
//! sigmoid, layer normalization, log of gathered probabilities, row/full sums
//! and scalar-weighted sums. Evaluation order is fixed, so repeated runs on
//! identical inputs are bit-identical.

use super::mask::AttentionMask;
use super::tensor::{matmul_into, transpose_into, Scalar, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    AddRowBroadcast {
        a: VarId,
        row: VarId,
    },
    Scale {
        a: VarId,
        factor: T,
    },
    GatherRows {
        a: VarId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<VarId>,
    },
    SliceCols {
        a: VarId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<VarId>,
    },
    Transpose {
        a: VarId,
    },
    /// Row softmax. Blocked weights were clamped to exact zero in the
    /// forward pass, which already zeroes their backward contribution.
    SoftmaxRows {
        a: VarId,
    },
    Sigmoid {
        a: VarId,
    },
    /// Row-wise layer norm; saves (mean, rstd) per row for the backward pass.
    LayerNorm {
        a: VarId,
        gain: VarId,
        bias: VarId,
    },
    /// `out[k] = ln(max(a[coords[k]], floor))`.
    GatherLog {
        a: VarId,
        coords: Vec<(usize, usize)>,
        floor: T,
    },
    SumAll {
        a: VarId,
    },
    SumRows {
        a: VarId,
    },
    WeightedSum {
        terms: Vec<(T, VarId)>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    /// Saved per-row statistics (layer norm only).
    aux: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, value, false, Vec::new())
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, value, true, Vec::new())
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call; `None` if none flowed.
    pub fn grad(&self, v: VarId) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool, aux: Vec<T>) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
            aux,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NnError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::MatMul { a, b },
            Tensor::new(vec![m, n], out).expect("matmul shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Add { a, b },
            Tensor::new(shape, data).expect("add shape"),
            needs,
            Vec::new(),
        ))
    }

    /// `[m,n] + [n]`, the row vector added to every row.
    pub fn add_row_broadcast(&mut self, a: VarId, row: VarId) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let (rm, rn) = self.value(row).dims2()?;
        if rm != 1 || rn != n {
            return Err(NnError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let rowd = self.value(row).data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (c, r) in chunk.iter_mut().zip(&rowd) {
                *c = *c + *r;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(
            Op::AddRowBroadcast { a, row },
            Tensor::new(vec![m, n], data).expect("broadcast shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn scale(&mut self, a: VarId, factor: T) -> VarId {
        let data: Vec<T> = self.value(a).data().iter().map(|x| *x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Op::Scale { a, factor },
            Tensor::new(shape, data).expect("scale shape"),
            needs,
            Vec::new(),
        )
    }

    /// Select rows by index (embedding lookup and sequence slicing).
    pub fn gather_rows(&mut self, a: VarId, indices: &[usize]) -> Result<VarId, NnError> {
        let (rows, cols) = self.value(a).dims2()?;
        for &i in indices {
            if i >= rows {
                return Err(NnError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.value(a).row(i));
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            Tensor::new(vec![indices.len(), cols], data).expect("gather shape"),
            needs,
            Vec::new(),
        ))
    }

    /// Stack inputs vertically; 1-d inputs count as single rows.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, NnError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut total_rows = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != cols {
                return Err(NnError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_rows += pm;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![total_rows, cols], data).expect("concat_rows shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(NnError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.value(a).row(r)[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SliceCols { a, start, len },
            Tensor::new(vec![m, len], data).expect("slice shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, NnError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut total_cols = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != rows {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_cols += pn;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, total_cols], data).expect("concat_cols shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = vec![T::zero(); m * n];
        transpose_into(self.value(a).data(), &mut data, m, n);
        let needs = self.needs(a);
        Ok(self.push(
            Op::Transpose { a },
            Tensor::new(vec![n, m], data).expect("transpose shape"),
            needs,
            Vec::new(),
        ))
    }

    /// Plain row softmax.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId, NnError> {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax with blocked entries forced to exact zero.
    ///
    /// Blocked scores receive the most negative finite value before the
    /// stable softmax, and the resulting weights are clamped to zero, so a
    /// blocked key contributes nothing to the mixture.
    pub fn softmax_rows_masked(
        &mut self,
        a: VarId,
        mask: Option<&AttentionMask>,
    ) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let blocked: Option<Vec<bool>> = match mask {
            None => None,
            Some(mask) => {
                if mask.rows() != m || mask.cols() != n {
                    return Err(NnError::ShapeMismatch {
                        op: "softmax_rows_masked",
                        lhs: vec![m, n],
                        rhs: vec![mask.rows(), mask.cols()],
                    });
                }
                Some(mask.dense().to_vec())
            }
        };
        let mut data = vec![T::zero(); m * n];
        let neg_lowest = T::min_value();
        for r in 0..m {
            let src = self.value(a).row(r);
            let row_blocked = |c: usize| blocked.as_ref().is_some_and(|b| b[r * n + c]);
            if (0..n).all(row_blocked) {
                return Err(NnError::FullyBlockedRow { row: r });
            }
            let mut max = neg_lowest;
            for (c, &x) in src.iter().enumerate() {
                let score = if row_blocked(c) { neg_lowest } else { x };
                if score > max {
                    max = score;
                }
            }
            let dst = &mut data[r * n..(r + 1) * n];
            let mut denom = T::zero();
            for (c, &x) in src.iter().enumerate() {
                let score = if row_blocked(c) { neg_lowest } else { x };
                let e = (score - max).exp();
                dst[c] = e;
                denom = denom + e;
            }
            for (c, w) in dst.iter_mut().enumerate() {
                *w = if row_blocked(c) {
                    T::zero()
                } else {
                    *w / denom
                };
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SoftmaxRows { a },
            Tensor::new(vec![m, n], data).expect("softmax shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(
            Op::Sigmoid { a },
            Tensor::new(shape, data).expect("sigmoid shape"),
            needs,
            Vec::new(),
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, a: VarId, gain: VarId, bias: VarId) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let (gm, gn) = self.value(gain).dims2()?;
        let (bm, bn) = self.value(bias).dims2()?;
        if gm != 1 || gn != n || bm != 1 || bn != n {
            return Err(NnError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let eps = T::from_f64(LN_EPS);
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut data = vec![T::zero(); m * n];
        let mut aux = Vec::with_capacity(2 * m);
        for r in 0..m {
            let src = self.value(a).row(r);
            let mut mean = T::zero();
            for &x in src {
                mean = mean + x;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &x in src {
                let d = x - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            aux.push(mean);
            aux.push(rstd);
            for c in 0..n {
                let xhat = (src[c] - mean) * rstd;
                data[r * n + c] = xhat * self.value(gain).data()[c] + self.value(bias).data()[c];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm { a, gain, bias },
            Tensor::new(vec![m, n], data).expect("layer_norm shape"),
            needs,
            aux,
        ))
    }

    /// `out[k] = ln(max(a[coords[k]], floor))`; the floor keeps log finite.
    pub fn gather_log(
        &mut self,
        a: VarId,
        coords: &[(usize, usize)],
        floor: T,
    ) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(NnError::IndexOutOfRange {
                    op: "gather_log",
                    index: r * n + c,
                    size: m * n,
                });
            }
            data.push(self.value(a).at2(r, c).max(floor).ln());
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherLog {
                a,
                coords: coords.to_vec(),
                floor,
            },
            Tensor::new(vec![coords.len()], data).expect("gather_log shape"),
            needs,
            Vec::new(),
        ))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let mut total = T::zero();
        for &x in self.value(a).data() {
            total = total + x;
        }
        let needs = self.needs(a);
        self.push(Op::SumAll { a }, Tensor::scalar(total), needs, Vec::new())
    }

    /// Sum along each row: `[m,n] -> [m]`.
    pub fn sum_rows(&mut self, a: VarId) -> Result<VarId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            let mut total = T::zero();
            for &x in &self.value(a).row(r)[..n] {
                total = total + x;
            }
            data.push(total);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SumRows { a },
            Tensor::new(vec![m], data).expect("sum_rows shape"),
            needs,
            Vec::new(),
        ))
    }

    /// Weighted sum of scalar nodes: `sum_k c_k * terms_k`.
    pub fn weighted_sum(&mut self, terms: &[(T, VarId)]) -> Result<VarId, NnError> {
        let mut total = T::zero();
        for &(c, v) in terms {
            if self.value(v).numel() != 1 {
                return Err(NnError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: vec![1],
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            total = total + c * self.value(v).item();
        }
        let needs = terms.iter().any(|&(_, v)| self.needs(v));
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(total),
            needs,
            Vec::new(),
        ))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, NnError> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: VarId) -> Result<(), NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                lhs: vec![1],
                rhs: self.value(loss).shape().to_vec(),
            });
        }
        if !self.value(loss).item().is_finite() {
            return Err(NnError::NonFinite { op: "backward" });
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: VarId, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        debug_assert_eq!(delta.len(), shape.iter().product::<usize>());
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(&delta) {
                    *gv = *gv + *dv;
                }
            }
            None => {
                self.nodes[v.0].grad = Some(Tensor::new(shape, delta).expect("grad shape"));
            }
        }
    }

    fn backprop_node(&mut self, i: usize) {
        let dout = self.nodes[i].grad.as_ref().expect("grad present").clone();
        let d = dout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2().expect("2d");
                let (_, n) = self.value(b).dims2().expect("2d");
                if self.needs(a) {
                    // dA = dC @ B^T
                    let mut bt = vec![T::zero(); k * n];
                    transpose_into(self.value(b).data(), &mut bt, k, n);
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(d, &bt, &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    // dB = A^T @ dC
                    let mut at = vec![T::zero(); m * k];
                    transpose_into(self.value(a).data(), &mut at, m, k);
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(&at, d, &mut db, k, m, n);
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, d.to_vec());
                self.accumulate(b, d.to_vec());
            }
            Op::AddRowBroadcast { a, row } => {
                let (a, row) = (*a, *row);
                let (m, n) = self.value(a).dims2().expect("2d");
                self.accumulate(a, d.to_vec());
                if self.needs(row) {
                    let mut drow = vec![T::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            drow[c] = drow[c] + d[r * n + c];
                        }
                    }
                    self.accumulate(row, drow);
                }
            }
            Op::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                self.accumulate(a, d.iter().map(|&x| x * factor).collect());
            }
            Op::GatherRows { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                let (rows, cols) = self.value(a).dims2().expect("2d");
                let mut da = vec![T::zero(); rows * cols];
                for (out_r, &src_r) in indices.iter().enumerate() {
                    for c in 0..cols {
                        da[src_r * cols + c] = da[src_r * cols + c] + d[out_r * cols + c];
                    }
                }
                self.accumulate(a, da);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let numel = self.value(p).numel();
                    self.accumulate(p, d[offset..offset + numel].to_vec());
                    offset += numel;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (m, n) = self.value(a).dims2().expect("2d");
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..len {
                        da[r * n + start + c] = d[r * len + c];
                    }
                }
                self.accumulate(a, da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let (rows, total_cols) = self.nodes[i].value.dims2().expect("2d");
                let mut offset = 0;
                for p in parts {
                    let (_, pn) = self.value(p).dims2().expect("2d");
                    let mut dp = vec![T::zero(); rows * pn];
                    for r in 0..rows {
                        for c in 0..pn {
                            dp[r * pn + c] = d[r * total_cols + offset + c];
                        }
                    }
                    self.accumulate(p, dp);
                    offset += pn;
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (m, n) = self.value(a).dims2().expect("2d");
                let mut da = vec![T::zero(); m * n];
                transpose_into(d, &mut da, n, m);
                self.accumulate(a, da);
            }
            Op::SoftmaxRows { a, .. } => {
                let a = *a;
                let (m, n) = self.nodes[i].value.dims2().expect("2d");
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut dot = T::zero();
                    for c in 0..n {
                        dot = dot + d[r * n + c] * y[r * n + c];
                    }
                    for c in 0..n {
                        da[r * n + c] = y[r * n + c] * (d[r * n + c] - dot);
                    }
                }
                self.accumulate(a, da);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let y = self.nodes[i].value.data();
                let da: Vec<T> = d
                    .iter()
                    .zip(y)
                    .map(|(&g, &yv)| g * yv * (T::one() - yv))
                    .collect();
                self.accumulate(a, da);
            }
            Op::LayerNorm { a, gain, bias } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let (m, n) = self.value(a).dims2().expect("2d");
                let inv_n = T::one() / T::from_f64(n as f64);
                let aux = self.nodes[i].aux.clone();
                let x = self.value(a).data().to_vec();
                let g = self.value(gain).data().to_vec();
                let mut da = vec![T::zero(); m * n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..m {
                    let mean = aux[2 * r];
                    let rstd = aux[2 * r + 1];
                    // dxhat_c = dy_c * gain_c; two row reductions feed dx.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..n {
                        let xhat = (x[r * n + c] - mean) * rstd;
                        let dy = d[r * n + c];
                        dgain[c] = dgain[c] + dy * xhat;
                        dbias[c] = dbias[c] + dy;
                        let dxhat = dy * g[c];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    for c in 0..n {
                        let xhat = (x[r * n + c] - mean) * rstd;
                        let dxhat = d[r * n + c] * g[c];
                        da[r * n + c] = rstd
                            * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
                    }
                }
                self.accumulate(a, da);
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
            }
            Op::GatherLog { a, coords, floor } => {
                let a = *a;
                let floor = *floor;
                let coords = coords.clone();
                let (m, n) = self.value(a).dims2().expect("2d");
                let mut da = vec![T::zero(); m * n];
                for (k, &(r, c)) in coords.iter().enumerate() {
                    let p = self.value(a).at2(r, c);
                    if p > floor {
                        da[r * n + c] = da[r * n + c] + d[k] / p;
                    }
                }
                self.accumulate(a, da);
            }
            Op::SumAll { a } => {
                let a = *a;
                let numel = self.value(a).numel();
                self.accumulate(a, vec![d[0]; numel]);
            }
            Op::SumRows { a } => {
                let a = *a;
                let (m, n) = self.value(a).dims2().expect("2d");
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = d[r];
                    }
                }
                self.accumulate(a, da);
            }
            Op::WeightedSum { terms } => {
                let terms = terms.clone();
                for (c, v) in terms {
                    self.accumulate(v, vec![c * d[0]]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2<T: Scalar>(rows: usize, cols: usize, vals: &[f64]) -> Tensor<T> {
        Tensor::new(
            vec![rows, cols],
            vals.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_uniform_input_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 3, &[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 4, &[0.3, -1.2, 2.0, 0.7]));
        let xs = tape.constant(t2(1, 4, &[0.3 + 5.5, -1.2 + 5.5, 2.0 + 5.5, 0.7 + 5.5]));
        let y1 = tape.softmax_rows(x).unwrap();
        let y2 = tape.softmax_rows(xs).unwrap();
        for (a, b) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t2(3, 5, &[
            0.1, -2.0, 3.0, 0.0, 1.0, //
            9.0, 9.0, 9.0, 9.0, 9.0, //
            -5.0, 5.0, 0.0, 2.5, -2.5,
        ]));
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 1, &[0.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn masked_softmax_blocked_weights_are_exact_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t2(2, 3, &[5.0, 1.0, -2.0, 0.0, 0.0, 0.0]));
        let mask = AttentionMask::from_pairs(2, 3, &[(0, 0), (1, 2)]).unwrap();
        let y = tape.softmax_rows_masked(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).at2(0, 0), 0.0);
        assert_eq!(tape.value(y).at2(1, 2), 0.0);
        let sum0: f32 = tape.value(y).row(0).iter().sum();
        assert!((sum0 - 1.0).abs() < 1e-6);
        // Row 1 is uniform over its two open entries.
        assert!((tape.value(y).at2(1, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn fully_blocked_row_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t2(1, 2, &[1.0, 2.0]));
        let mask = AttentionMask::from_pairs_unchecked(1, 2, &[(0, 0), (0, 1)]);
        let err = tape.softmax_rows_masked(x, Some(&mask)).unwrap_err();
        assert!(matches!(err, NnError::FullyBlockedRow { row: 0 }));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            NnError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || -> Vec<u32> {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(t2(3, 4, &[
                0.31, -0.7, 1.5, 0.02, 0.9, -1.1, 0.44, 0.0, -0.3, 0.8, -0.05, 2.2,
            ]));
            let w = tape.constant(t2(4, 4, &[
                0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, 0.11, -0.12, 0.13, 0.14,
                0.15, 0.16,
            ]));
            let xw = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(xw).unwrap();
            let y = tape.sigmoid(s);
            tape.value(y).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_of_quadratic_matches_closed_form() {
        // f(w) = sum(w * w) via matmul with transpose: grad = 2w.
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t2(1, 3, &[1.5, -2.0, 0.25]));
        let wt = tape.transpose(w).unwrap();
        let sq = tape.matmul(w, wt).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for (gv, wv) in g.data().iter().zip([1.5, -2.0, 0.25]) {
            assert!((gv - 2.0 * wv).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_log_applies_probability_floor() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(t2(1, 2, &[0.0, 0.5]));
        let out = tape.gather_log(p, &[(0, 0), (0, 1)], 1e-12).unwrap();
        assert!((tape.value(out).data()[0] - (1e-12f64).ln()).abs() < 1e-9);
        assert!((tape.value(out).data()[1] - 0.5f64.ln()).abs() < 1e-12);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        // Floored coordinate gets zero gradient; the live one gets 1/p.
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(f64::INFINITY));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { .. }));
    }
}

//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Every operation appends a node to an append-only arena, so the graph is
//! acyclic by construction and reverse topological order is just reverse
//! insertion order. A graph and its tensors belong to one logical execution
//! context; independent graphs may run concurrently.
//!
//! Any op that produces a NaN or infinity from finite inputs reports
//! [`Error::NonFinite`] instead of storing the value.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Operation tag with parent references and cached forward values needed by
/// the backward rule.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    ConcatRows(Vec<TensorId>),
    SliceRows { x: TensorId, start: usize, end: usize },
    ConcatCols(Vec<TensorId>),
    SliceCols { x: TensorId, start: usize, end: usize },
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(TensorId),
    MeanRows(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    Embedding { table: TensorId, ids: Vec<usize> },
    CosineSim { u: TensorId, v: TensorId, dot: f64, norm_u: f64, norm_v: f64 },
    CrossEntropy { logits: TensorId, probs: Vec<f64>, label: usize },
    StackScalars(Vec<TensorId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when any leaf below this node is a differentiation target.
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Its `requires_grad` flag decides whether `backward`
    /// populates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Insert a non-differentiable scalar constant.
    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    /// Forward value of a node.
    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a leaf after `backward`, if populated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn finite_checked(data: Vec<f64>, op: &'static str) -> Result<Vec<f64>> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(data)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn push_op(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        rg: bool,
        name: &'static str,
    ) -> Result<TensorId> {
        let data = Self::finite_checked(data, name)?;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, rg))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> =
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_op(shape, data, op, rg, name)
    }

    /// Scalar-times-tensor.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push_op(shape, data, Op::Scale(a, c), rg, "scale")
    }

    /// Constant shift of every element.
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x + c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push_op(shape, data, Op::AddScalar(a), rg, "add_scalar")
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.require_rank2("matmul")?;
        tb.require_rank2("matmul")?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_op(vec![m, n], data, Op::Matmul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        ta.require_rank2("transpose")?;
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let data = transpose_raw(ta.data(), m, n);
        let rg = self.rg(a);
        self.push_op(vec![n, m], data, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != ta.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                ta.shape(),
                ta.numel(),
                shape
            )));
        }
        let data = ta.data().to_vec();
        let rg = self.rg(a);
        self.push_op(shape, data, Op::Reshape(a), rg, "reshape")
    }

    // ── token-axis concat / slice ───────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one part".into()));
        }
        let cols = self.value(parts[0]).cols()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols()? != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            rows += tp.rows()?;
            data.extend_from_slice(tp.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_op(vec![rows, cols], data, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows()?, ta.cols()?);
        if start >= end || end > rows {
            return Err(Error::Index(format!(
                "row slice {start}..{end} out of {rows} rows"
            )));
        }
        let data = ta.data()[start * cols..end * cols].to_vec();
        let rg = self.rg(a);
        self.push_op(
            vec![end - start, cols],
            data,
            Op::SliceRows { x: a, start, end },
            rg,
            "slice_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let rows = self.value(parts[0]).rows()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.rows()? != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            widths.push(tp.cols()?);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let tp = self.value(p);
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(&tp.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_op(vec![rows, cols], data, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows()?, ta.cols()?);
        if start >= end || end > cols {
            return Err(Error::Index(format!(
                "column slice {start}..{end} out of {cols} columns"
            )));
        }
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&ta.data()[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(a);
        self.push_op(
            vec![rows, w],
            data,
            Op::SliceCols { x: a, start, end },
            rg,
            "slice_cols",
        )
    }

    // ── nonlinearities and reductions ───────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtraction).
    ///
    /// Rank-1 tensors take `axis = 0`; rank-2 tensors normalize each row
    /// with `axis = 1` or each column with `axis = 0`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let data = match shape.len() {
            1 => {
                if axis != 0 {
                    return Err(Error::Dimension(format!(
                        "softmax axis {axis} invalid for rank-1 tensor"
                    )));
                }
                softmax_slice(ta.data())
            }
            2 => {
                let (rows, cols) = (shape[0], shape[1]);
                let mut out = vec![0.0; rows * cols];
                match axis {
                    1 => {
                        for r in 0..rows {
                            let s = softmax_slice(&ta.data()[r * cols..(r + 1) * cols]);
                            out[r * cols..(r + 1) * cols].copy_from_slice(&s);
                        }
                    }
                    0 => {
                        for c in 0..cols {
                            let col: Vec<f64> =
                                (0..rows).map(|r| ta.data()[r * cols + c]).collect();
                            let s = softmax_slice(&col);
                            for r in 0..rows {
                                out[r * cols + c] = s[r];
                            }
                        }
                    }
                    _ => {
                        return Err(Error::Dimension(format!(
                            "softmax axis {axis} invalid for rank-2 tensor"
                        )))
                    }
                }
                out
            }
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax supports rank 1 and 2, shape is {shape:?}"
                )))
            }
        };
        let rg = self.rg(a);
        self.push_op(shape, data, Op::Softmax { x: a, axis }, rg, "softmax")
    }

    /// Per-row layer normalization of a `[T, d]` tensor with learned scale
    /// and shift vectors of length `d`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        const EPS: f64 = 1e-5;
        let tx = self.value(x);
        tx.require_rank2("layer_norm")?;
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if tb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push_op(
            vec![rows, cols],
            out,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
            "layer_norm",
        )
    }

    /// GELU activation (tanh form), applied elementwise.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| gelu_raw(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a);
        self.push_op(shape, data, Op::Gelu(a), rg, "gelu")
    }

    /// Mean over the token (row) axis: `[T, d] -> [d]`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows()?, ta.cols()?);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += ta.data()[r * cols + c];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let rg = self.rg(a);
        self.push_op(vec![cols], out, Op::MeanRows(a), rg, "mean_rows")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_op(vec![], vec![s], Op::SumAll(a), rg, "sum_all")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(a);
        self.push_op(vec![], vec![s], Op::MeanAll(a), rg, "mean_all")
    }

    /// Row gather from an embedding table `[V, d]` at integer ids.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tt = self.value(table);
        let (vocab, dim) = (tt.rows()?, tt.cols()?);
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("token id {bad} out of vocabulary {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        self.push_op(
            vec![ids.len(), dim],
            data,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
            "embedding",
        )
    }

    /// Cosine similarity of two vectors, in `[-1, 1]`.
    pub fn cosine_sim(&mut self, u: TensorId, v: TensorId) -> Result<TensorId> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.shape().len() != 1 || tv.shape().len() != 1 || tu.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: tu.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let dot: f64 = tu.data().iter().zip(tv.data()).map(|(&a, &b)| a * b).sum();
        let norm_u = tu.data().iter().map(|&a| a * a).sum::<f64>().sqrt();
        let norm_v = tv.data().iter().map(|&a| a * a).sum::<f64>().sqrt();
        if norm_u == 0.0 || norm_v == 0.0 {
            return Err(Error::Degenerate("cosine_sim of a zero-norm vector".into()));
        }
        let c = dot / (norm_u * norm_v);
        let rg = self.rg(u) || self.rg(v);
        self.push_op(
            vec![],
            vec![c],
            Op::CosineSim { u, v, dot, norm_u, norm_v },
            rg,
            "cosine_sim",
        )
    }

    /// Negative log-softmax of `logits` at `label`.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let tl = self.value(logits);
        if tl.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects a rank-1 logit vector, shape is {:?}",
                tl.shape()
            )));
        }
        let classes = tl.shape()[0];
        if label >= classes {
            return Err(Error::Index(format!("label {label} out of {classes} classes")));
        }
        let probs = softmax_slice(tl.data());
        let max = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + tl.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - tl.data()[label];
        let rg = self.rg(logits);
        self.push_op(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, probs, label },
            rg,
            "cross_entropy",
        )
    }

    /// Collect scalars into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_scalars needs at least one part".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            data.push(self.value(p).item()?);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_op(
            vec![parts.len()],
            data,
            Op::StackScalars(parts.to_vec()),
            rg,
            "stack_scalars",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates `grad` on every leaf whose
    /// tensor has `requires_grad`; leaves not on any path to the root get a
    /// zero gradient.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, shape is {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.backward_step(i, &gout)?;
            for (pid, g) in contributions {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                match &mut grads[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(gout);
            }
        }

        // Leaves unreachable from the root still get a (zero) gradient.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad && node.value.grad.is_none()
            {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    /// Local vector-Jacobian products of node `i` for its differentiable
    /// parents that require gradients.
    fn backward_step(&self, i: usize, gout: &[f64]) -> Result<Vec<(TensorId, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(TensorId, Vec<f64>)> = Vec::new();
        let mut emit = |this: &Graph, id: TensorId, g: Vec<f64>| {
            if this.rg(id) {
                out.push((id, g));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(self, *a, gout.to_vec());
                emit(self, *b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                emit(self, *a, gout.to_vec());
                emit(self, *b, gout.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                emit(self, *a, gout.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect());
                emit(self, *b, gout.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                emit(self, *a, gout.iter().map(|&g| g * c).collect());
            }
            Op::AddScalar(a) => {
                emit(self, *a, gout.to_vec());
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(tb.data(), k, n);
                    emit(self, *a, matmul_raw(gout, &bt, m, n, k));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(ta.data(), m, k);
                    emit(self, *b, matmul_raw(&at, gout, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                emit(self, *a, transpose_raw(gout, n, m));
            }
            Op::Reshape(a) => {
                emit(self, *a, gout.to_vec());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    emit(self, p, gout[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows { x, start, end } => {
                let tx = self.value(*x);
                let cols = tx.shape()[1];
                let mut g = vec![0.0; tx.numel()];
                g[start * cols..end * cols].copy_from_slice(gout);
                emit(self, *x, g);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut g = vec![0.0; rows * w];
                    for r in 0..rows {
                        g[r * w..(r + 1) * w]
                            .copy_from_slice(&gout[r * cols + offset..r * cols + offset + w]);
                    }
                    emit(self, p, g);
                    offset += w;
                }
            }
            Op::SliceCols { x, start, end } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let w = end - start;
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + end]
                        .copy_from_slice(&gout[r * w..(r + 1) * w]);
                }
                emit(self, *x, g);
            }
            Op::Softmax { x, axis } => {
                let s = node.value.data();
                let shape = node.value.shape();
                let mut g = vec![0.0; s.len()];
                if shape.len() == 1 {
                    softmax_backward_slice(s, gout, &mut g, 0, 1, s.len());
                } else {
                    let (rows, cols) = (shape[0], shape[1]);
                    if *axis == 1 {
                        for r in 0..rows {
                            softmax_backward_slice(s, gout, &mut g, r * cols, 1, cols);
                        }
                    } else {
                        for c in 0..cols {
                            softmax_backward_slice(s, gout, &mut g, c, cols, rows);
                        }
                    }
                }
                emit(self, *x, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = self.value(*gamma);
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxh = gout[r * cols + c] * tg.data()[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * cols + c];
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for c in 0..cols {
                            let dxh = gout[r * cols + c] * tg.data()[c];
                            gx[r * cols + c] = inv_std[r]
                                * (dxh - mean_dxhat - xhat[r * cols + c] * mean_dxhat_xhat);
                        }
                    }
                    emit(self, *x, gx);
                }
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += gout[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    emit(self, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += gout[r * cols + c];
                        }
                    }
                    emit(self, *beta, gb);
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let g = ta
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &go)| go * gelu_derivative(x))
                    .collect();
                emit(self, *a, g);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] = gout[c] / rows as f64;
                    }
                }
                emit(self, *a, g);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                emit(self, *a, vec![gout[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                emit(self, *a, vec![gout[0] / n as f64; n]);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let dim = tt.shape()[1];
                let mut g = vec![0.0; tt.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        g[id * dim + c] += gout[row * dim + c];
                    }
                }
                emit(self, *table, g);
            }
            Op::CosineSim { u, v, dot, norm_u, norm_v } => {
                let (tu, tv) = (self.value(*u), self.value(*v));
                let c = dot / (norm_u * norm_v);
                let go = gout[0];
                if self.rg(*u) {
                    let g = tu
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&ui, &vi)| go * (vi / (norm_u * norm_v) - c * ui / (norm_u * norm_u)))
                        .collect();
                    emit(self, *u, g);
                }
                if self.rg(*v) {
                    let g = tu
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&ui, &vi)| go * (ui / (norm_u * norm_v) - c * vi / (norm_v * norm_v)))
                        .collect();
                    emit(self, *v, g);
                }
            }
            Op::CrossEntropy { logits, probs, label } => {
                let go = gout[0];
                let g = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| go * (p - if j == *label { 1.0 } else { 0.0 }))
                    .collect();
                emit(self, *logits, g);
            }
            Op::StackScalars(parts) => {
                for (j, &p) in parts.iter().enumerate() {
                    emit(self, p, vec![gout[j]]);
                }
            }
        }
        Ok(out)
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// dX = S ∘ (dY − ⟨dY, S⟩) over one strided slice.
fn softmax_backward_slice(
    s: &[f64],
    gout: &[f64],
    g: &mut [f64],
    offset: usize,
    stride: usize,
    len: usize,
) {
    let mut dot = 0.0;
    for t in 0..len {
        let idx = offset + t * stride;
        dot += gout[idx] * s[idx];
    }
    for t in 0..len {
        let idx = offset + t * stride;
        g[idx] = s[idx] * (gout[idx] - dot);
    }
}

fn gelu_raw(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044715;
    let u = SQRT_2_OVER_PI * (x + C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

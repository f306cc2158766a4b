use super::{matmul_at_raw, matmul_bt_raw, matmul_raw, softmax_in_place, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded op, used to target gradient fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    ConcatRows,
    ConcatCols,
    SliceCols,
    GatherRows,
    Transpose,
    Relu,
    LayerNorm,
    MeanRows,
    SoftmaxRows,
    CrossEntropy,
    SumSquares,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Transpose(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumSquares(Var),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SumSquares(..) => OpKind::SumSquares,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended as ops execute, so every
/// node's inputs precede it and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!("{op} of {:?} and {:?}", a.shape(), b.shape()))
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    /// Scales every input gradient produced by ops of `kind` by `factor`.
    /// Exists only so gradient checkers can prove they detect broken rules.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff the tensor's `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, the layout used by linear layers storing `out × in` weights.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let out = Tensor::matrix(m, n, matmul_bt_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = tx.dims2()?;
        if tr.dims2()? != (1, n) {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (d, b) in data[r * n..(r + 1) * n].iter_mut().zip(tr.data()) {
                *d += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Rows of `a` followed by rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ma, na) = ta.dims2()?;
        let (mb, nb) = tb.dims2()?;
        if na != nb {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::matrix(ma + mb, na, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatRows(a, b), rg))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::matrix(m, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Gathers rows of `table` by index; the backward pass scatters.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = t.dims2()?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::matrix(ids.len(), n, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Token-embedding lookup: row `i` of the output is row `ids[i]` of `table`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = t.data()[r * n + c];
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Per-row layer normalisation with learnable `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = tx.dims2()?;
        if tg.dims2()? != (1, n) {
            return Err(shape_err("layer_norm gain", tx, tg));
        }
        if tb.dims2()? != (1, n) {
            return Err(shape_err("layer_norm bias", tx, tb));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (d, v) in data.iter_mut().zip(&t.data()[r * n..(r + 1) * n]) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let out = Tensor::matrix(1, n, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut data = t.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Mean over rows of the negative log-softmax at each row's label.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = t.dims2()?;
        if labels.len() != m {
            return Err(Error::Dimension(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                t.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Label(format!("label {bad} outside {n} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(&mut probs[r * n..(r + 1) * n]);
        }
        let out = Tensor::scalar(loss / m as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar loss. Gradients of every node that
    /// requires them are added into that node's buffer, so repeated calls
    /// accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(end);
        grads.resize_with(end, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let factor = match self.fault {
                Some((kind, f)) if kind == self.nodes[i].op.kind() => f,
                _ => 1.0,
            };
            self.propagate(i, &g, factor, &mut grads)?;
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        factor: f64,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        // Sends a contribution to `v` if it participates in differentiation.
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.numel();
                add_into(&mut grads[v.0], len, |buf| {
                    if factor == 1.0 {
                        f(buf);
                    } else {
                        let mut tmp = vec![0.0; len];
                        f(&mut tmp);
                        buf.iter_mut().zip(&tmp).for_each(|(b, t)| *b += factor * t);
                    }
                });
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).cols();
                send(*a, &|buf| {
                    // dA = G·Bᵀ
                    let d = matmul_bt_raw(g, val(*b).data(), m, n, k);
                    buf.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                });
                send(*b, &|buf| {
                    // dB = Aᵀ·G
                    let d = matmul_at_raw(val(*a).data(), g, m, k, n);
                    buf.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).rows();
                send(*a, &|buf| {
                    // dA = G·B
                    let d = matmul_raw(g, val(*b).data(), m, n, k);
                    buf.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                });
                send(*b, &|buf| {
                    // dB = Gᵀ·A
                    let d = matmul_at_raw(g, val(*a).data(), m, n, k);
                    buf.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                });
            }
            Op::Add(a, b) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                send(*a, &|buf| {
                    for ((x, gv), bv) in buf.iter_mut().zip(g).zip(db) {
                        *x += gv * bv;
                    }
                });
                send(*b, &|buf| {
                    for ((x, gv), av) in buf.iter_mut().zip(g).zip(da) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddRow(x, row) => {
                let n = val(*row).cols();
                send(*x, &|buf| buf.iter_mut().zip(g).for_each(|(b, y)| *b += y));
                send(*row, &|buf| {
                    for chunk in g.chunks(n) {
                        buf.iter_mut().zip(chunk).for_each(|(b, y)| *b += y);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).numel();
                send(*a, &|buf| {
                    buf.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y)
                });
                send(*b, &|buf| {
                    buf.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y)
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, &|buf| {
                        for r in 0..m {
                            let src = &g[r * total + offset..r * total + offset + w];
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2()?;
                let w = node.value.cols();
                send(*x, &|buf| {
                    for r in 0..m {
                        buf[r * n + start..r * n + start + w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(b, y)| *b += y);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = val(*table).cols();
                send(*table, &|buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        buf[id * n..(id + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(b, y)| *b += y);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2()?;
                send(*x, &|buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let dx = val(*x).data();
                send(*x, &|buf| {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(dx) {
                        if *xv > 0.0 {
                            *b += gv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = val(*x).dims2()?;
                let gd = val(*gain).data();
                send(*gain, &|buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                send(*bias, &|buf| {
                    for chunk in g.chunks(n) {
                        buf.iter_mut().zip(chunk).for_each(|(b, y)| *b += y);
                    }
                });
                send(*x, &|buf| {
                    let nf = n as f64;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gd[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        for c in 0..n {
                            let d = gr[c] * gd[c];
                            buf[r * n + c] += inv_std[r] / nf * (nf * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = val(*x).dims2()?;
                send(*x, &|buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c] / m as f64;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = val(*x).dims2()?;
                let y = node.value.data();
                send(*x, &|buf| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            buf[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (m, n) = val(*logits).dims2()?;
                let scale = g[0] / m as f64;
                send(*logits, &|buf| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..n {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            buf[r * n + c] += scale * (probs[r * n + c] - onehot);
                        }
                    }
                });
            }
            Op::SumSquares(x) => {
                let dx = val(*x).data();
                send(*x, &|buf| {
                    buf.iter_mut()
                        .zip(dx)
                        .for_each(|(b, v)| *b += 2.0 * v * g[0])
                });
            }
            Op::Sum(x) => {
                send(*x, &|buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(
            Tensor::new(shape.to_vec(), data.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = leaf(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let q = leaf(&mut tape, &[2, 2], &[0.0, 0.0, 0.0, 1.0]);
        let z = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn sum_squares_value_and_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let s = tape.sum_squares(x);
        assert_eq!(tape.value(s).item().unwrap(), 14.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let z = tape.constant(Tensor::zeros(&[4]));
        let s0 = tape.sum_squares(z);
        assert_eq!(tape.value(s0).item().unwrap(), 0.0);
    }

    #[test]
    fn leaf_used_twice_doubles_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, -1.0]);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]).unwrap(),
        );
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert_eq!(v.row(1), &[0.5, 0.5]);
        assert!((v.at(2, 0) - 0.25).abs() < 1e-15);
        assert!((v.at(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn concat_rows_preserves_blocks() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let c = tape.concat_rows(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.concat_rows(a, bad).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy_logits(uniform, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let sharp = tape.constant(Tensor::from_rows(&[&[1000.0, 0.0], &[0.0, 1000.0]]).unwrap());
        let l = tape.cross_entropy_logits(sharp, &[0, 1]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        assert!(matches!(
            tape.cross_entropy_logits(sharp, &[0, 2]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap());
        let g = tape.constant(Tensor::full(&[1, 4], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, &[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let rows = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = tape.sum(rows);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]).unwrap());
        let x = leaf(&mut tape, &[2], &[3.0, 4.0]);
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[3.0]);
        let s = tape.sum_squares(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }
}

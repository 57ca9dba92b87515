//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes its output
//! after its inputs, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::value::Tensor;
use crate::error::{Error, Result};

static SQRT_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`Graph::sqrt_eps`] met an input more negative than its
/// epsilon since process start.
pub fn sqrt_clamp_count() -> u64 {
    SQRT_CLAMPS.load(Ordering::Relaxed)
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SqrtEps(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    NormalizeRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation with per-node gradient slots.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`]; `None` if the
    /// node does not require grad or no path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Clears all gradients so backward may run again on the same graph.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = self.op_inputs(&op).iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(!inputs_finite, "non-finite output from finite inputs in {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::SqrtEps(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _) => vec![*a],
            Op::NormalizeRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(parts, _) => parts.clone(),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- linear algebra ----

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a dense layer's weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    // ---- elementwise ----

    fn zip_map(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `sqrt(max(x, 0) + eps)`. Inputs below `-eps` are clamped and counted.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let clamps = self.value(a).data().iter().filter(|&&x| x < -eps).count();
        if clamps > 0 {
            SQRT_CLAMPS.fetch_add(clamps as u64, Ordering::Relaxed);
        }
        let v = self.map(a, |x| (x.max(0.0) + eps).sqrt());
        self.push(v, Op::SqrtEps(a))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", x, b, |p, q| p + q)?;
        Ok(self.push(v, Op::AddRow(x, b)))
    }

    /// Multiplies every row of an `m×n` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", x, g, |p, q| p * q)?;
        Ok(self.push(v, Op::MulRow(x, g)))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (m, n) = self.matrix_dims(op, x)?;
        let bv = self.value(b);
        if bv.numel() != n || bv.rank() != 1 {
            return Err(Error::shape(op, self.shape(x), bv.shape()));
        }
        let xd = self.value(x).data();
        let bd = bv.data();
        let mut out = Vec::with_capacity(m * n);
        for row in xd.chunks(n) {
            out.extend(row.iter().zip(bd).map(|(&p, &q)| f(p, q)));
        }
        Tensor::new([m, n], out)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    fn axis_sum(&self, op: &'static str, a: Var, axis: usize) -> Result<(Tensor, usize)> {
        let x = self.value(a);
        match (x.shape(), axis) {
            ([n], 0) => Ok((Tensor::scalar(x.data().iter().sum()), *n)),
            ([r, c], 0) => {
                let mut out = vec![0.0; *c];
                for row in x.data().chunks(*c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Ok((Tensor::vector(out), *r))
            }
            ([_, c], 1) => {
                let out = x.data().chunks(*c).map(|row| row.iter().sum()).collect();
                Ok((Tensor::vector(out), *c))
            }
            (s, _) => Err(Error::invalid(op, format!("axis {axis} out of range for {s:?}"))),
        }
    }

    /// Sum over `axis`, dropping it. Rank ≤ 2.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (v, _) = self.axis_sum("sum_axis", a, axis)?;
        Ok(self.push(v, Op::SumAxis(a, axis)))
    }

    /// Mean over `axis`, dropping it. Rank ≤ 2.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut v, n) = self.axis_sum("mean_axis", a, axis)?;
        let inv = 1.0 / n as f64;
        v.data_mut().iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(v, Op::MeanAxis(a, axis)))
    }

    /// Softmax over the last axis (each row of a matrix, or a whole vector),
    /// stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() > 2 {
            return Err(Error::invalid("softmax", "rank > 2"));
        }
        let (_, n) = x.dims2();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    // ---- structural ----

    /// Concatenates matrices along `axis` (0 stacks rows, 1 joins columns),
    /// or vectors end to end with `axis == 0`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = self.value(first).rank();
        let value = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    if self.value(p).rank() != 1 {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let (_, c) = self.matrix_dims("concat", first)?;
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let (r, c2) = self.matrix_dims("concat", p)?;
                    if c2 != c {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new([rows, c], data)?
            }
            (2, 1) => {
                let (r, _) = self.matrix_dims("concat", first)?;
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (r2, c) = self.matrix_dims("concat", p)?;
                    if r2 != r {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new([r, total], data)?
            }
            _ => {
                return Err(Error::invalid(
                    "concat",
                    format!("unsupported axis {axis} for rank {rank}"),
                ))
            }
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} out of 0..{r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new([len, c], data)?, Op::SliceRows(x, start)))
    }

    /// Row `idx[i]` of `x` becomes row `i` of the output. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", x)?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of 0..{r}")));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        Ok(self.push(Tensor::new([n, c], data)?, Op::GatherRows(x, idx)))
    }

    // ---- fused ----

    /// Standardises each row to zero mean and unit (biased) variance:
    /// `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.matrix_dims("normalize_rows", x)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in xd.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        Ok(self.push(Tensor::new([r, c], out)?, Op::NormalizeRows { x, inv_std }))
    }

    /// Mean softmax cross-entropy of `logits[B×S]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, s) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} outside 0..{s}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(s).zip(labels) {
            let (arg, max) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, v)| if v > a.1 { (j, v) } else { a });
            // log-sum-exp minus max, with the max term's exp(0) = 1 split off
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            loss += (max - row[label]) + rest.ln_1p();
            softmax_in_place(row);
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Populates `d loss / d node` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].as_ref() else {
                continue;
            };
            if let Op::SliceRows(x, start) = self.nodes[i].op {
                // Written straight into the source rows: a full-size delta
                // per slice would make per-utterance slicing quadratic.
                if self.wants(x) {
                    let g = g.clone();
                    let c = self.value(x).dims2().1;
                    let shape = self.shape(x).to_vec();
                    let dx = self.grads[x.0].get_or_insert_with(|| Tensor::zeros(shape));
                    for (o, v) in dx.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                continue;
            }
            for (v, delta) in self.local_grads(i, g) {
                self.accumulate(v, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` with respect to its inputs.
    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut deltas = Vec::with_capacity(2);
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().1;
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, self.value(b).data(), &mut da, m, n, k);
                    deltas.push((a, Tensor::new([m, k], da).unwrap()));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(a).data(), gd, &mut db, k, m, n);
                    deltas.push((b, Tensor::new([k, n], db).unwrap()));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().0;
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(gd, self.value(b).data(), &mut da, m, n, k);
                    deltas.push((a, Tensor::new([m, k], da).unwrap()));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(gd, self.value(a).data(), &mut db, n, m, k);
                    deltas.push((b, Tensor::new([n, k], db).unwrap()));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j * r + i];
                    }
                }
                deltas.push((a, Tensor::new([r, c], da).unwrap()));
            }
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                deltas.push((a, g.clone().reshape(shape).unwrap()));
            }
            &Op::Add(a, b) => {
                deltas.push((a, g.clone()));
                deltas.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                deltas.push((a, g.clone()));
                let neg = map_like(g, gd.iter().map(|v| -v));
                deltas.push((b, neg));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let yb = self.value(b).data();
                    let da = map_like(g, gd.iter().zip(yb).map(|(p, q)| p * q));
                    deltas.push((a, da));
                }
                if self.wants(b) {
                    let xa = self.value(a).data();
                    let db = map_like(g, gd.iter().zip(xa).map(|(p, q)| p * q));
                    deltas.push((b, db));
                }
            }
            &Op::Scale(a, s) => {
                let da = map_like(g, gd.iter().map(|v| v * s));
                deltas.push((a, da));
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                let da = map_like(g, gd.iter().zip(x).map(|(p, &q)| if q > 0.0 { *p } else { 0.0 }));
                deltas.push((a, da));
            }
            &Op::Tanh(a) => {
                let y = out.data();
                let da = map_like(g, gd.iter().zip(y).map(|(p, q)| p * (1.0 - q * q)));
                deltas.push((a, da));
            }
            &Op::SqrtEps(a) => {
                let x = self.value(a).data();
                let y = out.data();
                let da = map_like(
                    g,
                    gd.iter()
                        .zip(x.iter().zip(y))
                        .map(|(p, (&xv, &yv))| if xv >= 0.0 { p * 0.5 / yv } else { 0.0 }),
                );
                deltas.push((a, da));
            }
            &Op::AddRow(x, b) => {
                if self.wants(b) {
                    let n = self.value(b).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    deltas.push((b, Tensor::vector(db)));
                }
                deltas.push((x, g.clone()));
            }
            &Op::MulRow(x, w) => {
                let n = self.value(w).numel();
                if self.wants(w) {
                    let xd = self.value(x).data();
                    let mut dw = vec![0.0; n];
                    for (grow, xrow) in gd.chunks(n).zip(xd.chunks(n)) {
                        for ((o, p), q) in dw.iter_mut().zip(grow).zip(xrow) {
                            *o += p * q;
                        }
                    }
                    deltas.push((w, Tensor::vector(dw)));
                }
                if self.wants(x) {
                    let wd = self.value(w).data();
                    let mut dx = Vec::with_capacity(gd.len());
                    for grow in gd.chunks(n) {
                        dx.extend(grow.iter().zip(wd).map(|(p, q)| p * q));
                    }
                    deltas.push((x, map_like(g, dx.into_iter()).reshape(self.shape(x).to_vec()).unwrap()));
                }
            }
            &Op::SumAll(a) => {
                let da = Tensor::full(self.shape(a).to_vec(), gd[0]);
                deltas.push((a, da));
            }
            &Op::SumAxis(a, axis) | &Op::MeanAxis(a, axis) => {
                let shape = self.shape(a).to_vec();
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis(..)) {
                    1.0 / shape[axis] as f64
                } else {
                    1.0
                };
                let mut da = Tensor::zeros(shape.clone());
                match (shape.as_slice(), axis) {
                    ([_], 0) => da.data_mut().iter_mut().for_each(|v| *v = gd[0] * scale),
                    ([_, c], 0) => {
                        for row in da.data_mut().chunks_mut(*c) {
                            for (o, v) in row.iter_mut().zip(gd) {
                                *o = v * scale;
                            }
                        }
                    }
                    ([_, c], 1) => {
                        for (row, v) in da.data_mut().chunks_mut(*c).zip(gd) {
                            row.iter_mut().for_each(|o| *o = v * scale);
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
                deltas.push((a, da));
            }
            &Op::Softmax(a) => {
                let (_, n) = out.dims2();
                let y = out.data();
                let mut da = Vec::with_capacity(y.len());
                for (yrow, grow) in y.chunks(n).zip(gd.chunks(n)) {
                    let dotp: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    da.extend(yrow.iter().zip(grow).map(|(yv, gv)| yv * (gv - dotp)));
                }
                deltas.push((a, map_like(g, da.into_iter())));
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let (rows, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let piece = if shape.len() == 1 {
                        let n = shape[0];
                        let d = gd[offset..offset + n].to_vec();
                        offset += n;
                        Tensor::vector(d)
                    } else if axis == 0 {
                        let n = shape[0] * shape[1];
                        let d = gd[offset..offset + n].to_vec();
                        offset += n;
                        Tensor::new(shape, d).unwrap()
                    } else {
                        let w = shape[1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        Tensor::new(shape, d).unwrap()
                    };
                    deltas.push((p, piece));
                }
            }
            // accumulated in place by `backward`
            Op::SliceRows(..) => {}
            Op::GatherRows(x, idx) => {
                let x = *x;
                let (_, c) = self.value(x).dims2();
                let mut dx = Tensor::zeros(self.shape(x).to_vec());
                {
                    let dd = dx.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in dd[src * c..(src + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *o += v;
                        }
                    }
                }
                deltas.push((x, dx));
            }
            Op::NormalizeRows { x, inv_std } => {
                let x = *x;
                let (_, c) = out.dims2();
                let y = out.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((yrow, grow), is) in y.chunks(c).zip(gd.chunks(c)).zip(inv_std) {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| is * (gv - mg - yv * mgy)));
                }
                deltas.push((x, map_like(g, dx.into_iter()).reshape(self.shape(x).to_vec()).unwrap()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let (b, s) = self.value(logits).dims2();
                let scale = gd[0] / b as f64;
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(s).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                deltas.push((logits, Tensor::new([b, s], d).unwrap()));
            }
        }
        deltas
    }
}

fn map_like(like: &Tensor, it: impl Iterator<Item = f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), it.collect()).expect("same element count")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value, its input
//! handles and whatever it saved for the backward pass. Nodes can only refer
//! to earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] simply walks it in reverse.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{c, Real, Tensor};

/// Epsilon used by every layer norm in the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    AddConst { a: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    Relu { a: Var },
    Tanh { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { a: Var, rows: Vec<usize> },
    SelectCols { a: Var, cols: Vec<usize> },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize },
    Reshape { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::AddConst { .. } => "add_const",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "embedding_gather",
            Op::SelectRows { .. } => "select_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Reshape { .. } => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulBt { a, b }
            | Op::Bmm { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { a, bias } => vec![*a, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::AddConst { a }
            | Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Relu { a }
            | Op::Tanh { a }
            | Op::Softmax { a }
            | Op::SelectRows { a, .. }
            | Op::SelectCols { a, .. }
            | Op::SplitHeads { a, .. }
            | Op::MergeHeads { a, .. }
            | Op::Reshape { a }
            | Op::Dropout { a, .. }
            | Op::Sum { a } => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Summary of one tape record, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
    pub requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.values()
    }

    fn out(&mut self, dims: Vec<usize>, values: Vec<T>, op: Op<T>) -> Var {
        let t = Tensor::new(dims, values).expect("kernel output matches dims");
        self.push(t, op)
    }

    /// `a[.., k] x b[k, n]`, flattening the leading dimensions of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        let k = *ad.last().unwrap();
        if ad.len() < 2 || bd.len() != 2 || bd[0] != k {
            return Err(shape_err("matmul", ad, bd));
        }
        let n = bd[1];
        let m = self.value(a).numel() / k.max(1);
        let mut dims = ad[..ad.len() - 1].to_vec();
        dims.push(n);
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.vals(a), self.vals(b), &mut out, m, k, n);
        Ok(self.out(dims, out, Op::MatMul { a, b }))
    }

    /// `a[.., k] x b[n, k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        let k = *ad.last().unwrap();
        if ad.len() < 2 || bd.len() != 2 || bd[1] != k {
            return Err(shape_err("matmul_bt", ad, bd));
        }
        let n = bd[0];
        let m = self.value(a).numel() / k.max(1);
        let mut dims = ad[..ad.len() - 1].to_vec();
        dims.push(n);
        let mut out = vec![T::zero(); m * n];
        mm_bt_acc(self.vals(a), self.vals(b), &mut out, m, k, n);
        Ok(self.out(dims, out, Op::MatMulBt { a, b }))
    }

    /// Batched product `a[g, m, k] x b[g, k, n]`, or `b[g, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(shape_err("bmm", ad, bd));
        }
        let (g, m, k) = (ad[0], ad[1], ad[2]);
        let (bk, n) = if trans_b { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
        if bk != k {
            return Err(shape_err("bmm", ad, bd));
        }
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.vals(a), self.vals(b));
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                mm_bt_acc(ab, bb, ob, m, k, n);
            } else {
                mm_acc(ab, bb, ob, m, k, n);
            }
        }
        Ok(self.out(vec![g, m, n], out, Op::Bmm { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| *x + *y).collect();
        Ok(self.out(self.dims(a).to_vec(), out, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("mul", self.dims(a), self.dims(b)));
        }
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| *x * *y).collect();
        Ok(self.out(self.dims(a).to_vec(), out, Op::Mul { a, b }))
    }

    /// Adds a vector along the last dimension.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.dims(a).last().unwrap();
        if self.dims(bias) != [n] {
            return Err(shape_err("add_row", self.dims(a), self.dims(bias)));
        }
        let bv = self.vals(bias);
        let out = self
            .vals(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x + *y))
            .collect();
        Ok(self.out(self.dims(a).to_vec(), out, Op::AddRow { a, bias }))
    }

    /// Adds a constant tensor that takes no gradient (attention masks).
    pub fn add_const(&mut self, a: Var, constant: &[T]) -> Result<Var> {
        if constant.len() != self.value(a).numel() {
            return Err(shape_err("add_const", self.dims(a), &[constant.len()]));
        }
        let out = self.vals(a).iter().zip(constant).map(|(x, y)| *x + *y).collect();
        Ok(self.out(self.dims(a).to_vec(), out, Op::AddConst { a }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.vals(a).iter().map(|x| *x * s).collect();
        self.out(self.dims(a).to_vec(), out, Op::Scale { a, s })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.vals(a).iter().map(|x| gelu(*x)).collect();
        self.out(self.dims(a).to_vec(), out, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.vals(a).iter().map(|x| x.max(T::zero())).collect();
        self.out(self.dims(a).to_vec(), out, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.vals(a).iter().map(|x| x.tanh()).collect();
        self.out(self.dims(a).to_vec(), out, Op::Tanh { a })
    }

    /// Layer norm over the last dimension with [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, c(LAYER_NORM_EPS))
    }

    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let n = *self.dims(x).last().unwrap();
        if self.dims(gain) != [n] || self.dims(bias) != [n] {
            return Err(shape_err("layer_norm", self.dims(x), self.dims(gain)));
        }
        let xv = self.vals(x);
        let (gv, bv) = (self.vals(gain), self.vals(bias));
        let rows = xv.len() / n.max(1);
        let inv_n = T::one() / c::<T>(n as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let dims = self.dims(x).to_vec();
        Ok(self.out(dims, out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Softmax over the last dimension. `-inf` entries receive exactly zero
    /// weight; a row that is entirely `-inf` yields zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.dims(a).last().unwrap();
        let mut out = self.vals(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.out(self.dims(a).to_vec(), out, Op::Softmax { a })
    }

    /// Gathers rows of `table[v, d]` for each id, giving `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let td = self.dims(table);
        if td.len() != 2 {
            return Err(shape_err("embedding_gather", td, &[ids.len()]));
        }
        let (v, d) = (td[0], td[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: v,
            });
        }
        let tv = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.out(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Selects rows of the `[rows, n]` view of `a` (leading dims flattened).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = *self.dims(a).last().unwrap();
        let total = self.value(a).numel() / n.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Index {
                what: "row selection",
                index: bad,
                bound: total,
            });
        }
        let av = self.vals(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        Ok(self.out(vec![rows.len(), n], out, Op::SelectRows { a, rows: rows.to_vec() }))
    }

    /// Selects columns of a `[m, n]` tensor.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ad = self.dims(a);
        if ad.len() != 2 {
            return Err(shape_err("select_cols", ad, &[cols.len()]));
        }
        let (m, n) = (ad[0], ad[1]);
        if let Some(&bad) = cols.iter().find(|&&col| col >= n) {
            return Err(Error::Index {
                what: "column selection",
                index: bad,
                bound: n,
            });
        }
        let av = self.vals(a);
        let mut out = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            out.extend(cols.iter().map(|&col| av[r * n + col]));
        }
        Ok(self.out(vec![m, cols.len()], out, Op::SelectCols { a, cols: cols.to_vec() }))
    }

    /// `[batch * seq, heads * dh]` to `[batch * heads, seq, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let d = *self.dims(a).last().unwrap();
        if self.value(a).numel() != batch * seq * d || heads == 0 || d % heads != 0 {
            return Err(shape_err("split_heads", self.dims(a), &[batch, seq, heads]));
        }
        let dh = d / heads;
        let av = self.vals(a);
        let mut out = vec![T::zero(); av.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * d + h * dh;
                    let dst = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        Ok(self.out(vec![batch * heads, seq, dh], out, Op::SplitHeads { a, batch, seq, heads }))
    }

    /// Inverse of [`Tape::split_heads`], giving `[batch, seq, heads * dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let ad = self.dims(a);
        if ad.len() != 3 || ad[0] != batch * heads || ad[1] != seq {
            return Err(shape_err("merge_heads", ad, &[batch, seq, heads]));
        }
        let dh = ad[2];
        let d = dh * heads;
        let av = self.vals(a);
        let mut out = vec![T::zero(); av.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + s) * d + h * dh;
                    let src = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        Ok(self.out(vec![batch, seq, d], out, Op::MergeHeads { a, batch, seq, heads }))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let numel: usize = dims.iter().product();
        if dims.is_empty() || numel != self.value(a).numel() {
            return Err(shape_err("reshape", self.dims(a), dims));
        }
        let out = self.vals(a).to_vec();
        Ok(self.out(dims.to_vec(), out, Op::Reshape { a }))
    }

    /// Inverted dropout. Identity (no node recorded) when `p == 0` or not training.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract("dropout probability must lie in [0, 1)"));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = c::<T>(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.vals(a).iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        Ok(self.out(self.dims(a).to_vec(), out, Op::Dropout { a, mask }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().copied().sum();
        self.out(vec![1], vec![s], Op::Sum { a })
    }

    /// Mean negative log-softmax of `logits[n, c]` at the target classes,
    /// skipping rows whose target equals `ignore_id`. Zero when every row is
    /// ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_id: i64) -> Result<Var> {
        let ld = self.dims(logits);
        if ld.len() != 2 || ld[0] != targets.len() {
            return Err(shape_err("cross_entropy", ld, &[targets.len()]));
        }
        let classes = ld[1];
        let mut resolved = Vec::with_capacity(targets.len());
        for &t in targets {
            if t == ignore_id {
                resolved.push(None);
            } else if t >= 0 && (t as usize) < classes {
                resolved.push(Some(t as usize));
            } else {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t.max(0) as usize,
                    bound: classes,
                });
            }
        }
        let lv = self.vals(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in resolved.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &lv[r * classes..(r + 1) * classes];
            let p = &mut probs[r * classes..(r + 1) * classes];
            p.copy_from_slice(row);
            let lse = log_sum_exp(row);
            softmax_in_place(p);
            total = total + (lse - row[*t]);
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / c::<T>(count as f64)
        };
        Ok(self.out(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: resolved,
                probs,
                count,
            },
        ))
    }

    /// Back-propagates from a scalar. Gradients accumulate on every node that
    /// requires one and can be read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, &self.nodes, loss, |g| g[0] = g[0] + T::one());
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, gout: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let k = *nodes[a.0].value.dims().last().unwrap();
                let n = nodes[b.0].value.dims()[1];
                let m = nodes[a.0].value.numel() / k.max(1);
                accumulate(grads, nodes, *a, |ga| mm_bt_acc(gout, val(*b), ga, m, n, k));
                accumulate(grads, nodes, *b, |gb| mm_at_acc(val(*a), gout, gb, k, m, n));
            }
            Op::MatMulBt { a, b } => {
                let k = *nodes[a.0].value.dims().last().unwrap();
                let n = nodes[b.0].value.dims()[0];
                let m = nodes[a.0].value.numel() / k.max(1);
                accumulate(grads, nodes, *a, |ga| mm_acc(gout, val(*b), ga, m, n, k));
                accumulate(grads, nodes, *b, |gb| mm_at_acc(gout, val(*a), gb, n, m, k));
            }
            Op::Bmm { a, b, trans_b } => {
                let ad = nodes[a.0].value.dims();
                let (g, m, k) = (ad[0], ad[1], ad[2]);
                let n = node.value.dims()[2];
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |ga| {
                    for gi in 0..g {
                        let go = &gout[gi * m * n..(gi + 1) * m * n];
                        let bb = &bv[gi * k * n..(gi + 1) * k * n];
                        let gab = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            mm_acc(go, bb, gab, m, n, k);
                        } else {
                            mm_bt_acc(go, bb, gab, m, n, k);
                        }
                    }
                });
                accumulate(grads, nodes, *b, |gb| {
                    for gi in 0..g {
                        let go = &gout[gi * m * n..(gi + 1) * m * n];
                        let ab = &av[gi * m * k..(gi + 1) * m * k];
                        let gbb = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            mm_at_acc(go, ab, gbb, n, m, k);
                        } else {
                            mm_at_acc(ab, go, gbb, k, m, n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                accumulate(grads, nodes, *a, |ga| add_into(ga, gout));
                accumulate(grads, nodes, *b, |gb| add_into(gb, gout));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, nodes, *a, |ga| {
                    for ((g, o), y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g = *g + *o * *y;
                    }
                });
                accumulate(grads, nodes, *b, |gb| {
                    for ((g, o), x) in gb.iter_mut().zip(gout).zip(av) {
                        *g = *g + *o * *x;
                    }
                });
            }
            Op::AddRow { a, bias } => {
                accumulate(grads, nodes, *a, |ga| add_into(ga, gout));
                let n = nodes[bias.0].value.numel();
                accumulate(grads, nodes, *bias, |gb| {
                    for row in gout.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                accumulate(grads, nodes, *a, |ga| add_into(ga, gout));
            }
            Op::Scale { a, s } => {
                accumulate(grads, nodes, *a, |ga| {
                    for (g, o) in ga.iter_mut().zip(gout) {
                        *g = *g + *o * *s;
                    }
                });
            }
            Op::Gelu { a } => {
                let av = val(*a);
                accumulate(grads, nodes, *a, |ga| {
                    for ((g, o), x) in ga.iter_mut().zip(gout).zip(av) {
                        *g = *g + *o * gelu_grad(*x);
                    }
                });
            }
            Op::Relu { a } => {
                let av = val(*a);
                accumulate(grads, nodes, *a, |ga| {
                    for ((g, o), x) in ga.iter_mut().zip(gout).zip(av) {
                        if *x > T::zero() {
                            *g = *g + *o;
                        }
                    }
                });
            }
            Op::Tanh { a } => {
                let yv = node.value.values();
                accumulate(grads, nodes, *a, |ga| {
                    for ((g, o), y) in ga.iter_mut().zip(gout).zip(yv) {
                        *g = *g + *o * (T::one() - *y * *y);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = nodes[gain.0].value.numel();
                let gv = val(*gain);
                let inv_n = T::one() / c::<T>(n as f64);
                accumulate(grads, nodes, *x, |gx| {
                    let mut dxhat = vec![T::zero(); n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let go = &gout[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            dxhat[j] = go[j] * gv[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dx = mean_dx + dxhat[j] * xh[j];
                        }
                        mean_d = mean_d * inv_n;
                        mean_dx = mean_dx * inv_n;
                        let gr = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            gr[j] = gr[j] + *rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                accumulate(grads, nodes, *gain, |gg| {
                    for (go, xh) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + go[j] * xh[j];
                        }
                    }
                });
                accumulate(grads, nodes, *bias, |gb| {
                    for go in gout.chunks(n) {
                        add_into(gb, go);
                    }
                });
            }
            Op::Softmax { a } => {
                let n = *node.value.dims().last().unwrap();
                let yv = node.value.values();
                accumulate(grads, nodes, *a, |ga| {
                    for ((g, go), y) in ga.chunks_mut(n).zip(gout.chunks(n)).zip(yv.chunks(n)) {
                        let dot: T = go.iter().zip(y).map(|(p, q)| *p * *q).sum();
                        for j in 0..n {
                            g[j] = g[j] + y[j] * (go[j] - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.dims()[1];
                accumulate(grads, nodes, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let n = *node.value.dims().last().unwrap();
                accumulate(grads, nodes, *a, |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &gout[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SelectCols { a, cols } => {
                let n = nodes[a.0].value.dims()[1];
                let w = cols.len();
                accumulate(grads, nodes, *a, |ga| {
                    for (r, go) in gout.chunks(w.max(1)).enumerate() {
                        for (j, &col) in cols.iter().enumerate() {
                            ga[r * n + col] = ga[r * n + col] + go[j];
                        }
                    }
                });
            }
            Op::SplitHeads { a, batch, seq, heads } => {
                let d = *nodes[a.0].value.dims().last().unwrap();
                let dh = d / heads;
                accumulate(grads, nodes, *a, |ga| {
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let src = (b * seq + s) * d + h * dh;
                                let dst = ((b * heads + h) * seq + s) * dh;
                                add_into(&mut ga[src..src + dh], &gout[dst..dst + dh]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, batch, seq, heads } => {
                let dh = nodes[a.0].value.dims()[2];
                let d = dh * heads;
                accumulate(grads, nodes, *a, |ga| {
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let dst = (b * seq + s) * d + h * dh;
                                let src = ((b * heads + h) * seq + s) * dh;
                                add_into(&mut ga[src..src + dh], &gout[dst..dst + dh]);
                            }
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                accumulate(grads, nodes, *a, |ga| {
                    for ((g, o), m) in ga.iter_mut().zip(gout).zip(mask) {
                        *g = *g + *o * *m;
                    }
                });
            }
            Op::Sum { a } => {
                accumulate(grads, nodes, *a, |ga| {
                    for g in ga.iter_mut() {
                        *g = *g + gout[0];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = nodes[logits.0].value.dims()[1];
                let scale = gout[0] / c::<T>(*count as f64);
                accumulate(grads, nodes, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        let p = &probs[r * classes..(r + 1) * classes];
                        for j in 0..classes {
                            row[j] = row[j] + p[j] * scale;
                        }
                        row[*t] = row[*t] - scale;
                    }
                });
            }
        }
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(g);
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let k = c::<T>(0.797_884_560_802_865_4); // sqrt(2 / pi)
    let inner = k * (x + c::<T>(0.044715) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = c::<T>(0.797_884_560_802_865_4);
    let a = c::<T>(0.044715);
    let t = (k * (x + a * x * x * x)).tanh();
    let half = c::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|v| (*v - m).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn mm_bt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(arow, brow);
        }
    }
}

/// `out[m, n] += a[k, m]^T * b[k, n]`
pub(crate) fn mm_at_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
/// The reduction order depends only on the length, keeping results reproducible.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for ci in 0..chunks {
        let (x, y) = (&a[ci * 8..ci * 8 + 8], &b[ci * 8..ci * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).values(), &[5., 6., 7., 8.]);

        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        let y = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(y).values(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x);
        for v in tape.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[3], &[1., f64::NEG_INFINITY, 2.]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).values()[1], 0.0);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::filled(&[1, 4], 3.5));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gelu_matches_closed_form() {
        let x = 1.0f64;
        let expect = 0.5 * x * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((gelu(x) - expect).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
    }

    #[test]
    fn embedding_gather_reports_bad_id() {
        let mut tape = Tape::<f32>::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert_eq!(
            tape.embedding_gather(table, &[1, 7]).unwrap_err(),
            Error::Index {
                what: "embedding table",
                index: 7,
                bound: 4
            }
        );
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::filled(&[8], 1.0));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(tape.value(y).values().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[0.; 4]));
        let l = tape.cross_entropy(x, &[2], -1).unwrap();
        assert!((tape.value(l).values()[0] - 4f64.ln()).abs() < 1e-12);

        let x = tape.constant(t(&[1, 2], &[1e4, 0.]));
        let l = tape.cross_entropy(x, &[0], -1).unwrap();
        assert!(tape.value(l).values()[0].abs() < 1e-12);

        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]).with_grad());
        let l = tape.cross_entropy(x, &[-1, -1], -1).unwrap();
        assert_eq!(tape.value(l).values()[0], 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).map_or(true, |g| g.iter().all(|v| *v == 0.0)));

        assert!(tape.cross_entropy(x, &[0, 5], -1).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., -2., 5.]).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[3.]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_record_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 1], &[2.]));
        let b = tape.constant(t(&[1, 1], &[3.]));
        let y = tape.matmul(a, b).unwrap();
        assert!(!tape.requires_grad(y));
        let recs = tape.records();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].op, "matmul");
        assert!(recs.iter().all(|r| r.inputs.iter().all(|i| *i < r.output)));
    }
}

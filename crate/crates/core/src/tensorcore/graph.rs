//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and the backward sweep is a single reverse pass.

use std::collections::HashMap;

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Affine(NodeId, S),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Clamp(NodeId, S, S),
    Sum(NodeId),
    Mean(NodeId),
    BceLogits(NodeId, Vec<S>),
    BceProbs(NodeId, Vec<S>),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Affine(..) => "affine",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceLogits(..) => "bce_logits",
            Op::BceProbs(..) => "bce_probs",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// A single forward pass and its gradients.
///
/// Not shared between threads while in use; build one graph per pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    params: HashMap<String, NodeId>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `c[n x m] += a[n x k] * b[k x m]`
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(id)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected rank-2, got {:?}", self.value(id).shape())))
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Result<NodeId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b) => self.rg(*a) || self.rg(*b),
            Op::Concat(ids) => ids.iter().any(|&i| self.rg(i)),
            Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Gather(a, _)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::BceLogits(a, _)
            | Op::BceProbs(a, _) => self.rg(*a),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<NodeId, TensorError> {
        let mut v = t;
        let rg = v.requires_grad();
        // the node keeps only the flag; gradient storage lives in `grads`
        v.set_requires_grad(false);
        let id = self.push(Op::Leaf, v)?;
        self.nodes[id.0].requires_grad = rg;
        Ok(id)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<NodeId, TensorError> {
        self.leaf(t.detached())
    }

    /// Registers a named parameter once per graph; later calls return the
    /// same node so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor<S>) -> Result<NodeId, TensorError> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let mut v = t.detached();
        v.set_requires_grad(true);
        let id = self.leaf(v)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Gradient of the last `backward` call w.r.t. a named parameter.
    pub fn param_grad(&self, name: &str) -> Option<&[S]> {
        self.param_node(name).and_then(|id| self.grad(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (n, k) = self.dims(a, "matmul")?;
        let (k2, m) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![S::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push(Op::MatMul(a, b), Tensor::matrix(n, m, out)?)
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (n, m) = self.dims(x, "add_row")?;
        let (r, m2) = self.dims(row, "add_row")?;
        if r != 1 || m != m2 {
            return Err(shape_err("add_row", format!("[{n}, {m}] + [{r}, {m2}]")));
        }
        let b = self.value(row).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|xr| xr.iter().zip(b).map(|(&u, &v)| u + v))
            .collect();
        self.push(Op::AddRow(x, row), Tensor::matrix(n, m, out)?)
    }

    /// `x W + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, op.name())?;
        let shape = self.value(a).shape().to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&u, &v)| f(u, v))
            .collect();
        self.push(op, Tensor::new(shape, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(a, b, Op::Add(a, b), |u, v| u + v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(a, b, Op::Sub(a, b), |u, v| u - v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(a, b, Op::Mul(a, b), |u, v| u * v)
    }

    /// Scales each row of `x[n, m]` by the matching entry of `col[n, 1]`.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId, TensorError> {
        let (n, m) = self.dims(x, "mul_col")?;
        let (n2, c) = self.dims(col, "mul_col")?;
        if n != n2 || c != 1 {
            return Err(shape_err("mul_col", format!("[{n}, {m}] * [{n2}, {c}]")));
        }
        let cv = self.value(col).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(m)
            .zip(cv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        self.push(Op::MulCol(x, col), Tensor::matrix(n, m, out)?)
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId, TensorError> {
        self.map(x, Op::Affine(x, factor), |v| v * factor)
    }

    fn map(&mut self, x: NodeId, op: Op<S>, f: impl Fn(S) -> S) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&u| f(u)).collect())?;
        self.push(op, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.map(x, Op::Relu(x), |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> Result<NodeId, TensorError> {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (n, m) = self.dims(x, "softmax")?;
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).data().chunks(m) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            let mut z = S::zero();
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        self.push(Op::Softmax(x), Tensor::matrix(n, m, out)?)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let (n, _) = self.dims(parts[0], "concat")?;
        for &p in parts {
            let (r, c) = self.dims(p, "concat")?;
            if r != n {
                return Err(shape_err("concat", format!("row counts {n} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::matrix(n, total, out)?)
    }

    /// Selects columns of `x` by index.
    pub fn gather_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId, TensorError> {
        let (n, m) = self.dims(x, "gather")?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(shape_err("gather", format!("column {bad} out of range for width {m}")));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * cols.len());
        for row in data.chunks(m.max(1)).take(n) {
            out.extend(cols.iter().map(|&c| row[c]));
        }
        self.push(Op::Gather(x, cols.to_vec()), Tensor::matrix(n, cols.len(), out)?)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s: S = v.data().iter().copied().sum::<S>() / S::of(v.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[S]) -> Result<NodeId, TensorError> {
        let v = self.value(logits);
        if v.len() != labels.len() || v.is_empty() {
            return Err(shape_err(
                "bce_logits",
                format!("{} logits, {} labels", v.len(), labels.len()),
            ));
        }
        let mut total = S::zero();
        for (&x, &y) in v.data().iter().zip(labels) {
            // max(x, 0) - x y + ln(1 + e^{-|x|})
            total += x.max(S::zero()) - x * y + (-x.abs()).exp().ln_1p();
        }
        let loss = total / S::of(labels.len() as f64);
        self.push(Op::BceLogits(logits, labels.to_vec()), Tensor::scalar(loss))
    }

    /// Mean binary cross-entropy on probabilities. Callers clamp first.
    pub fn bce_probs(&mut self, probs: NodeId, labels: &[S]) -> Result<NodeId, TensorError> {
        let v = self.value(probs);
        if v.len() != labels.len() || v.is_empty() {
            return Err(shape_err(
                "bce_probs",
                format!("{} probs, {} labels", v.len(), labels.len()),
            ));
        }
        let mut total = S::zero();
        for (&p, &y) in v.data().iter().zip(labels) {
            total -= y * p.ln() + (S::one() - y) * (S::one() - p).ln();
        }
        let loss = total / S::of(labels.len() as f64);
        self.push(Op::BceProbs(probs, labels.to_vec()), Tensor::scalar(loss))
    }

    /// Reverse sweep from a scalar loss. Replaces gradients of any earlier
    /// sweep on this graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.rg(loss) {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        gout: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |id: NodeId, delta: Vec<S>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match grads[id.0].as_mut() {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                None => grads[id.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let (_, m) = self.value(*b).dims2().unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut da = vec![S::zero(); n * k];
                    for i in 0..n {
                        let grow = &gout[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&g, &b)| g * b).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * m];
                    for i in 0..n {
                        let grow = &gout[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d += aip * g;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::AddRow(x, row) => {
                let (_, m) = self.value(*x).dims2().unwrap();
                acc(*x, gout.to_vec());
                let mut db = vec![S::zero(); m];
                for grow in gout.chunks(m) {
                    db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                }
                acc(*row, db);
            }
            Op::Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gout.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                acc(*b, gout.iter().zip(av).map(|(&g, &v)| g * v).collect());
            }
            Op::MulCol(x, col) => {
                let (_, m) = self.value(*x).dims2().unwrap();
                let xv = self.value(*x).data();
                let cv = self.value(*col).data();
                let dx = gout
                    .chunks(m)
                    .zip(cv)
                    .flat_map(|(g, &c)| g.iter().map(move |&v| v * c))
                    .collect();
                let dc = gout
                    .chunks(m)
                    .zip(xv.chunks(m))
                    .map(|(g, xr)| g.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                    .collect();
                acc(*x, dx);
                acc(*col, dc);
            }
            Op::Affine(x, factor) => {
                acc(*x, gout.iter().map(|&g| g * *factor).collect());
            }
            Op::Sigmoid(x) => {
                acc(
                    *x,
                    gout.iter()
                        .zip(out)
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect(),
                );
            }
            Op::Tanh(x) => {
                acc(
                    *x,
                    gout.iter()
                        .zip(out)
                        .map(|(&g, &y)| g * (S::one() - y * y))
                        .collect(),
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    gout.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                        .collect(),
                );
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    gout.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { S::zero() })
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let (_, m) = self.value(*x).dims2().unwrap();
                let mut dx = Vec::with_capacity(out.len());
                for (g, y) in gout.chunks(m).zip(out.chunks(m)) {
                    let dot: S = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    dx.extend(g.iter().zip(y).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&gout[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::Gather(x, cols) => {
                let (n, m) = self.value(*x).dims2().unwrap();
                let w = cols.len();
                let mut dx = vec![S::zero(); n * m];
                for i in 0..n {
                    for (j, &c) in cols.iter().enumerate() {
                        dx[i * m + c] += gout[i * w + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                acc(*x, vec![gout[0]; self.value(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gout[0] / S::of(n as f64); n]);
            }
            Op::BceLogits(x, labels) => {
                let n = S::of(labels.len() as f64);
                let xv = self.value(*x).data();
                acc(
                    *x,
                    xv.iter()
                        .zip(labels)
                        .map(|(&v, &y)| gout[0] * (sigmoid(v) - y) / n)
                        .collect(),
                );
            }
            Op::BceProbs(x, labels) => {
                let n = S::of(labels.len() as f64);
                let pv = self.value(*x).data();
                acc(
                    *x,
                    pv.iter()
                        .zip(labels)
                        .map(|(&p, &y)| gout[0] * (-y / p + (S::one() - y) / (S::one() - p)) / n)
                        .collect(),
                );
            }
        }
        Ok(())
    }
}

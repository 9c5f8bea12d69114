//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every training step. Forward operations
//! evaluate eagerly and append a node to the tape; [`Graph::backward`] walks
//! the tape in reverse and returns one gradient per registered
//! [`Parameter`]. Constants (and frozen parameters) never receive gradient,
//! so a constant input such as the copy term passes straight through.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{CenetError, Result};
use crate::optim::Parameter;
use crate::tensor::{self, SparseRows, Tensor};

/// Floor applied to the argument of `log` so it never reaches zero.
pub const LOG_EPS: f64 = 1e-12;
/// Floor applied to row norms in [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(usize),
    MatMulT(NodeId, NodeId),
    SparseMatMulT(Arc<SparseRows>, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    L2Normalize(NodeId),
    SoftmaxRows(NodeId),
    Pick(NodeId, Vec<usize>),
    Log(NodeId),
    Sum(NodeId),
    OffDiagLogSoftmax(NodeId),
    WeightedSum(NodeId, Tensor),
    BceWithLogits(NodeId, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct ParamSlot {
    name: String,
    frozen: bool,
    node: NodeId,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamSlot>,
    by_name: HashMap<String, NodeId>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(CenetError::shape(op, t.shape(), &[0, 0]));
    }
    Ok(t.dims2())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(slot) => !self.params[slot].frozen,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    /// Registers a parameter as a leaf. Registering the same name twice
    /// returns the existing node, so shared tables accumulate one gradient.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        if let Some(&id) = self.by_name.get(&p.name) {
            return id;
        }
        let slot = self.params.len();
        self.params.push(ParamSlot {
            name: p.name.clone(),
            frozen: p.frozen,
            node: NodeId(self.nodes.len()),
        });
        let id = self.push(p.value.clone(), Op::Param(slot), &[]);
        self.by_name.insert(p.name.clone(), id);
        id
    }

    /// `x · Wᵀ` for `x: [n×k]`, `w: [m×k]`.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(x), self.value(w));
        let (n, k) = expect_matrix("matmul", a)?;
        let (m, k2) = expect_matrix("matmul", b)?;
        if k != k2 {
            return Err(CenetError::shape("matmul", a.shape(), b.shape()));
        }
        let out = tensor::matmul_nt(a.data(), n, k, b.data(), m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMulT(x, w), &[x, w]))
    }

    /// `S · Wᵀ` where `S` is a constant sparse matrix `[n×k]` and `w: [m×k]`.
    pub fn sparse_matmul_t(&mut self, s: Arc<SparseRows>, w: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        let (m, k) = expect_matrix("sparse_matmul", wv)?;
        if s.cols() != k {
            return Err(CenetError::shape(
                "sparse_matmul",
                &[s.rows(), s.cols()],
                wv.shape(),
            ));
        }
        let n = s.rows();
        let mut out = vec![0.0; n * m];
        let wd = wv.data();
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for (e, v) in s.row(i) {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += v * wd[j * k + e];
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::SparseMatMulT(s, w), &[w]))
    }

    /// Affine map `x · Wᵀ + b` with `w: [out×in]`, `b: [out]`, `x: [batch×in]`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (ws, bs, xs) = (self.value(w), self.value(b), self.value(x));
        let (out, inp) = expect_matrix("linear", ws)?;
        let (_, xin) = expect_matrix("linear", xs)?;
        if inp != xin {
            return Err(CenetError::shape("linear", ws.shape(), xs.shape()));
        }
        if bs.len() != out {
            return Err(CenetError::shape("linear", ws.shape(), bs.shape()));
        }
        let y = self.matmul_t(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, m) = expect_matrix("add_bias", av)?;
        if bv.len() != m {
            return Err(CenetError::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut out = av.data().to_vec();
        let bias = bv.data();
        for i in 0..n {
            for (o, bj) in out[i * m..(i + 1) * m].iter_mut().zip(bias) {
                *o += bj;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::AddBias(a, b), &[a, b]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(CenetError::shape(op, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.value(a);
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|v| v * c).collect(),
        )
        .expect("shape preserved");
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|v| v.tanh()).collect(),
        )
        .expect("shape preserved");
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Horizontal concatenation of `[batch × dᵢ]` blocks.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or(CenetError::EmptyInput("concat"))?;
        let rows = expect_matrix("concat", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = expect_matrix("concat", self.value(x))?;
            if r != rows {
                return Err(CenetError::shape(
                    "concat",
                    self.value(*first).shape(),
                    self.value(x).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Embedding lookup: rows `idx` of a `[N×d]` table.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (n, d) = expect_matrix("gather_rows", tv)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(CenetError::IdOutOfRange {
                    kind: "row",
                    id: i as u64,
                    limit: n as u64,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(value, Op::Gather(table, idx.to_vec()), &[table]))
    }

    /// Projects each row onto the unit sphere: `x / max(‖x‖, NORM_EPS)`.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, d) = expect_matrix("l2_normalize", av)?;
        let mut out = av.data().to_vec();
        for i in 0..n {
            let row = &mut out[i * d..(i + 1) * d];
            let norm = tensor::dot(row, row).sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::L2Normalize(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, m) = expect_matrix("softmax_rows", av)?;
        if m == 0 {
            return Err(CenetError::EmptyInput("softmax_rows"));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            tensor::softmax_into(av.row(i), &mut out[i * m..(i + 1) * m]);
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Selects `a[i, idx[i]]` for every row, giving a `[n]` vector.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let (n, m) = expect_matrix("pick", av)?;
        if idx.len() != n {
            return Err(CenetError::shape("pick", av.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(n);
        for (i, &j) in idx.iter().enumerate() {
            if j >= m {
                return Err(CenetError::IdOutOfRange {
                    kind: "column",
                    id: j as u64,
                    limit: m as u64,
                });
            }
            out.push(av.get(i, j));
        }
        Ok(self.push(Tensor::vector(out), Op::Pick(a, idx.to_vec()), &[a]))
    }

    /// `ln(max(x, LOG_EPS))` elementwise.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|v| v.max(LOG_EPS).ln()).collect(),
        )
        .expect("shape preserved");
        self.push(value, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Row-wise log-softmax of a square matrix with the diagonal excluded from
    /// every normaliser. Diagonal outputs are fixed at zero.
    pub fn off_diag_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, m) = expect_matrix("off_diag_log_softmax", av)?;
        if n != m {
            return Err(CenetError::shape(
                "off_diag_log_softmax",
                av.shape(),
                &[n, n],
            ));
        }
        let mut out = vec![0.0; n * n];
        if n > 1 {
            for i in 0..n {
                let row = av.row(i);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| (v - max).exp())
                    .sum();
                let lse = max + sum.ln();
                for j in 0..n {
                    if j != i {
                        out[i * n + j] = row[j] - lse;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        Ok(self.push(value, Op::OffDiagLogSoftmax(a), &[a]))
    }

    /// `Σ a ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape() != weights.shape() {
            return Err(CenetError::shape(
                "weighted_sum",
                av.shape(),
                weights.shape(),
            ));
        }
        let total = av
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(a, weights), &[a]))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[bool]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(CenetError::shape(
                "bce_with_logits",
                lv.shape(),
                &[targets.len()],
            ));
        }
        let y: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let total: f64 = lv
            .data()
            .iter()
            .zip(&y)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / y.len() as f64);
        Ok(self.push(value, Op::BceWithLogits(logits, y), &[logits]))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; frozen or unreachable parameters get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(CenetError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.params.len());
        param_grads.resize_with(self.params.len(), || None);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, node, g, &mut grads, &mut param_grads)?;
        }

        let mut out = BTreeMap::new();
        for (slot, p) in self.params.iter().enumerate() {
            let shape = self.value(p.node).shape().to_vec();
            let tensor = match (p.frozen, param_grads[slot].take()) {
                (false, Some(g)) => Tensor::new(shape, g)?,
                _ => Tensor::zeros(&shape),
            };
            out.insert(p.name.clone(), tensor);
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &self,
        id: usize,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(slot) => accumulate(&mut param_grads[*slot], g),
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2();
                let m = bv.rows();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], tensor::matmul_nn(&g, n, m, bv.data(), k));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], tensor::matmul_tn(&g, n, m, av.data(), k));
                }
            }
            Op::SparseMatMulT(s, w) => {
                let (m, k) = self.value(*w).dims2();
                let mut dw = vec![0.0; m * k];
                for i in 0..s.rows() {
                    let gi = &g[i * m..(i + 1) * m];
                    for (e, v) in s.row(i) {
                        for (j, gij) in gi.iter().enumerate() {
                            dw[j * k + e] += gij * v;
                        }
                    }
                }
                accumulate(&mut grads[w.0], dw);
            }
            Op::AddBias(a, b) => {
                let (n, m) = y.dims2();
                if self.wants(*b) {
                    let mut db = vec![0.0; m];
                    for i in 0..n {
                        for (d, gi) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *d += gi;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|v| v * c).collect());
            }
            Op::Tanh(a) => {
                let dx = g
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                accumulate(&mut grads[a.0], dx);
            }
            Op::Concat(xs) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for x in xs {
                    let w = self.value(*x).cols();
                    if self.wants(*x) {
                        let mut part = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            part.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads[x.0], part);
                    }
                    offset += w;
                }
            }
            Op::Gather(table, idx) => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (i, &r) in idx.iter().enumerate() {
                    for (slot, gi) in dt[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                    {
                        *slot += gi;
                    }
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::L2Normalize(a) => {
                let xv = self.value(*a);
                let (n, d) = xv.dims2();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let x = xv.row(i);
                    let gi = &g[i * d..(i + 1) * d];
                    let norm = tensor::dot(x, x).sqrt();
                    let r = norm.max(NORM_EPS);
                    let coef = if norm > NORM_EPS {
                        tensor::dot(gi, x) / (norm * norm * norm)
                    } else {
                        0.0
                    };
                    for j in 0..d {
                        dx[i * d + j] = gi[j] / r - x[j] * coef;
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = y.dims2();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let yi = y.row(i);
                    let gi = &g[i * m..(i + 1) * m];
                    let inner = tensor::dot(gi, yi);
                    for j in 0..m {
                        dx[i * m + j] = yi[j] * (gi[j] - inner);
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::Pick(a, idx) => {
                let m = self.value(*a).cols();
                let mut dx = vec![0.0; idx.len() * m];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * m + j] = g[i];
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::Log(a) => {
                let xv = self.value(*a);
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, &xi)| if xi > LOG_EPS { gi / xi } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::OffDiagLogSoftmax(a) => {
                let n = y.rows();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    let gi = &g[i * n..(i + 1) * n];
                    let gsum: f64 = gi
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, v)| v)
                        .sum();
                    for j in 0..n {
                        if j != i {
                            dx[i * n + j] = gi[j] - y.get(i, j).exp() * gsum;
                        }
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::WeightedSum(a, w) => {
                accumulate(
                    &mut grads[a.0],
                    w.data().iter().map(|wi| wi * g[0]).collect(),
                );
            }
            Op::BceWithLogits(a, targets) => {
                let zv = self.value(*a);
                let n = targets.len() as f64;
                let dx = zv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) / n * g[0])
                    .collect();
                accumulate(&mut grads[a.0], dx);
            }
        }
        debug_assert!(id < self.nodes.len());
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

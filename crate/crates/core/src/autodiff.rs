//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. Because a node
//! can only reference nodes that already exist, the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use atpinn_core::autodiff::Tape;
//! use atpinn_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(&tape, x).item(), 6.0);
//! ```
//!
//! Binary elementwise operations accept equal shapes, a single-element
//! operand, a `[1, c]` row against `[r, c]`, or an `[r, 1]` column against
//! `[r, c]`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_new, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Supported operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Tanh,
    Sin,
    Cos,
    Exp,
    Powi(i32),
    Abs,
    Square,
    Sum,
    Mean,
    /// Multiply by a fixed constant.
    Scale(f64),
    /// Add a fixed constant.
    Shift(f64),
    /// Select one column of a matrix as an `[r, 1]` matrix.
    Column(usize),
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Tanh => "tanh",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Exp => "exp",
            OpKind::Powi(_) => "powi",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Column(_) => "column",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::Leaf => 0,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            _ => 1,
        }
    }
}

/// A recorded computation step.
#[derive(Debug, Clone)]
pub struct GraphNode {
    op: OpKind,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    /// True when some requires_grad leaf is an ancestor (or this node itself).
    tracks_grad: bool,
}

impl GraphNode {
    pub fn op_kind(&self) -> OpKind {
        self.op
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `id`, or zeros shaped like its value when nothing reached it.
    pub fn get(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.adjoints.get(id.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }

    pub fn take(&mut self, tape: &Tape, id: NodeId) -> Tensor {
        match self.adjoints.get_mut(id.0).and_then(Option::take) {
            Some(t) => t,
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

/// Computation record. Confined to one thread; build one per evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<GraphNode>,
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Full,
    Scalar,
    Row,
    Col,
}

fn bcast_of(big: &[usize], small: &[usize]) -> Option<Bcast> {
    let small_len: usize = small.iter().product();
    if big == small {
        return Some(Bcast::Full);
    }
    if small_len == 1 {
        return Some(Bcast::Scalar);
    }
    if big.len() == 2 {
        let (r, c) = (big[0], big[1]);
        if (small == [1, c] || small == [c]) && small_len == c {
            return Some(Bcast::Row);
        }
        if small == [r, 1] {
            return Some(Bcast::Col);
        }
    }
    None
}

#[inline]
fn bidx(mode: Bcast, idx: usize, cols: usize) -> usize {
    match mode {
        Bcast::Full => idx,
        Bcast::Scalar => 0,
        Bcast::Row => idx % cols,
        Bcast::Col => idx / cols,
    }
}

/// Sum a full-shape gradient down to an operand's broadcast shape.
fn reduce_to(mode: Bcast, grad: &[f64], cols: usize, target: &mut [f64]) {
    match mode {
        Bcast::Full => {
            for (t, g) in target.iter_mut().zip(grad) {
                *t += g;
            }
        }
        Bcast::Scalar => target[0] += grad.iter().sum::<f64>(),
        Bcast::Row => {
            for row in grad.chunks_exact(cols) {
                for (t, g) in target.iter_mut().zip(row) {
                    *t += g;
                }
            }
        }
        Bcast::Col => {
            for (t, row) in target.iter_mut().zip(grad.chunks_exact(cols)) {
                *t += row.iter().sum::<f64>();
            }
        }
    }
}

/// Result shape and per-operand broadcast modes for a binary elementwise op.
fn binary_layout(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
    let la: usize = a.iter().product();
    let lb: usize = b.iter().product();
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if la >= lb {
        let mb = bcast_of(a, b).ok_or_else(mismatch)?;
        Ok((a.to_vec(), Bcast::Full, mb))
    } else {
        let ma = bcast_of(b, a).ok_or_else(mismatch)?;
        Ok((b.to_vec(), ma, Bcast::Full))
    }
}

/// `tanh` through a single `exp`; libm's version is several times slower.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 0.02 {
        let x2 = x * x;
        return x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0))));
    }
    if ax > 20.0 {
        return x.signum();
    }
    let t = 1.0 - 2.0 / ((2.0 * ax).exp() + 1.0);
    t.copysign(x)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
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

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record a leaf. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            op: OpKind::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
            tracks_grad: requires_grad,
        });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    /// Apply `op` to `operands`, recording the result.
    pub fn apply(&mut self, op: OpKind, operands: &[NodeId]) -> Result<NodeId> {
        if op == OpKind::Leaf {
            return Err(Error::invalid("leaf nodes are created with Tape::leaf"));
        }
        if operands.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: operands.len(),
            });
        }
        for &id in operands {
            self.check(id)?;
        }
        let value = self.forward(op, operands)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let tracks_grad = operands.iter().any(|id| self.nodes[id.0].tracks_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            op,
            parents: operands.to_vec(),
            value,
            requires_grad: false,
            tracks_grad,
        });
        Ok(id)
    }

    fn forward(&self, op: OpKind, operands: &[NodeId]) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[operands[i].0].value;
        let out = match op {
            OpKind::Leaf => unreachable!(),
            OpKind::Add => self.binary(op, v(0), v(1), |a, b| a + b)?,
            OpKind::Sub => self.binary(op, v(0), v(1), |a, b| a - b)?,
            OpKind::Mul => self.binary(op, v(0), v(1), |a, b| a * b)?,
            OpKind::Div => self.binary(op, v(0), v(1), |a, b| a / b)?,
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                Tensor::matrix(m, n, gemm_new(m, k, n, a.data(), false, b.data(), false))?
            }
            OpKind::Transpose => {
                let a = v(0);
                if a.shape().len() != 2 {
                    return Err(Error::ShapeMismatch {
                        op: "transpose",
                        lhs: a.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                a.transpose()
            }
            OpKind::Tanh => v(0).map(fast_tanh),
            OpKind::Sin => v(0).map(f64::sin),
            OpKind::Cos => v(0).map(f64::cos),
            OpKind::Exp => v(0).map(f64::exp),
            OpKind::Powi(n) => v(0).map(|x| x.powi(n)),
            OpKind::Abs => v(0).map(f64::abs),
            OpKind::Square => v(0).map(|x| x * x),
            OpKind::Scale(c) => v(0).map(|x| x * c),
            OpKind::Shift(c) => v(0).map(|x| x + c),
            OpKind::Sum => Tensor::scalar(v(0).data().iter().sum()),
            OpKind::Mean => {
                let a = v(0);
                if a.is_empty() {
                    return Err(Error::invalid("mean of an empty tensor"));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            OpKind::Column(j) => {
                let a = v(0);
                if a.shape().len() != 2 || j >= a.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "column",
                        lhs: a.shape().to_vec(),
                        rhs: vec![j],
                    });
                }
                let col: Vec<f64> = (0..a.rows()).map(|i| a.get(i, j)).collect();
                Tensor::matrix(a.rows(), 1, col)?
            }
        };
        Ok(out)
    }

    fn binary(
        &self,
        op: OpKind,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (shape, ma, mb) = binary_layout(op.name(), a.shape(), b.shape())?;
        let len: usize = shape.iter().product();
        let cols = if shape.len() >= 2 { shape[1] } else { 1 };
        let (ad, bd) = (a.data(), b.data());
        let data = if let (Bcast::Full, Bcast::Full) = (ma, mb) {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if let (Bcast::Full, Bcast::Row) = (ma, mb) {
            let mut out = Vec::with_capacity(len);
            for row in ad.chunks_exact(cols) {
                out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
            out
        } else if let (Bcast::Row, Bcast::Full) = (ma, mb) {
            let mut out = Vec::with_capacity(len);
            for row in bd.chunks_exact(cols) {
                out.extend(ad.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            (0..len)
                .map(|i| f(ad[bidx(ma, i, cols)], bd[bidx(mb, i, cols)]))
                .collect()
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sin, &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Cos, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn powi(&mut self, a: NodeId, n: i32) -> Result<NodeId> {
        self.apply(OpKind::Powi(n), &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Shift(c), &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        self.apply(OpKind::Column(j), &[a])
    }

    /// Reverse sweep from a single-element `root`.
    ///
    /// The tape is left untouched, so calling this again yields the same
    /// adjoints.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if node.op == OpKind::Leaf {
                if !node.requires_grad {
                    adj[idx] = None;
                }
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if !node.tracks_grad {
                continue;
            }
            for p in &node.parents {
                if p.0 >= idx {
                    return Err(Error::invalid(format!(
                        "tape cycle: node {idx} references {}",
                        p.0
                    )));
                }
            }
            self.propagate(node, &g, &mut adj)?;
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate<'a>(&self, adj: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
        let slot = &mut adj[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        slot.as_mut().unwrap()
    }

    /// Add `contrib` (full result shape) into the adjoint of `id`.
    fn deposit(&self, adj: &mut [Option<Tensor>], id: NodeId, mode: Bcast, contrib: Vec<f64>, cols: usize) {
        if let (Bcast::Full, None) = (mode, adj[id.0].as_ref()) {
            let shape = self.nodes[id.0].value.shape().to_vec();
            adj[id.0] = Some(Tensor::new(shape, contrib).expect("adjoint shape mirrors value"));
            return;
        }
        let target = self.accumulate(adj, id);
        reduce_to(mode, &contrib, cols, target.data_mut());
    }

    fn propagate(&self, node: &GraphNode, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let parents = &node.parents;
        let wants = |i: usize| self.nodes[parents[i].0].tracks_grad;
        let gd = g.data();
        match node.op {
            OpKind::Leaf => {}
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                let (shape, ma, mb) = binary_layout(node.op.name(), a.shape(), b.shape())?;
                let cols = if shape.len() >= 2 { shape[1] } else { 1 };
                let (ad, bd) = (a.data(), b.data());
                let full = matches!((ma, mb), (Bcast::Full, Bcast::Full));
                for side in 0..2 {
                    if !wants(side) {
                        continue;
                    }
                    let contrib: Vec<f64> = match (node.op, side) {
                        (OpKind::Add, _) | (OpKind::Sub, 0) => gd.to_vec(),
                        (OpKind::Sub, _) => gd.iter().map(|v| -v).collect(),
                        (OpKind::Mul, 0) if full => {
                            gd.iter().zip(bd).map(|(g, b)| g * b).collect()
                        }
                        (OpKind::Mul, _) if full => {
                            gd.iter().zip(ad).map(|(g, a)| g * a).collect()
                        }
                        (OpKind::Mul, 0) => gd
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * bd[bidx(mb, i, cols)])
                            .collect(),
                        (OpKind::Mul, _) => gd
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * ad[bidx(ma, i, cols)])
                            .collect(),
                        (OpKind::Div, 0) => gd
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g / bd[bidx(mb, i, cols)])
                            .collect(),
                        (OpKind::Div, _) => gd
                            .iter()
                            .enumerate()
                            .map(|(i, g)| {
                                let bv = bd[bidx(mb, i, cols)];
                                -g * ad[bidx(ma, i, cols)] / (bv * bv)
                            })
                            .collect(),
                        _ => unreachable!(),
                    };
                    let mode = if side == 0 { ma } else { mb };
                    self.deposit(adj, parents[side], mode, contrib, cols);
                }
            }
            OpKind::MatMul => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if wants(0) {
                    // dA += G B^T
                    match adj[parents[0].0].as_mut() {
                        Some(t) => gemm(m, n, k, gd, false, b.data(), true, 1.0, t.data_mut()),
                        None => {
                            let d = gemm_new(m, n, k, gd, false, b.data(), true);
                            adj[parents[0].0] = Some(Tensor::new(a.shape().to_vec(), d)?);
                        }
                    }
                }
                if wants(1) {
                    // dB += A^T G
                    match adj[parents[1].0].as_mut() {
                        Some(t) => gemm(k, m, n, a.data(), true, gd, false, 1.0, t.data_mut()),
                        None => {
                            let d = gemm_new(k, m, n, a.data(), true, gd, false);
                            adj[parents[1].0] = Some(Tensor::new(b.shape().to_vec(), d)?);
                        }
                    }
                }
            }
            OpKind::Transpose => {
                if wants(0) {
                    let gt = g.transpose();
                    let target = self.accumulate(adj, parents[0]);
                    for (t, v) in target.data_mut().iter_mut().zip(gt.data()) {
                        *t += v;
                    }
                }
            }
            OpKind::Sum | OpKind::Mean => {
                if wants(0) {
                    let len = self.nodes[parents[0].0].value.len();
                    let scale = if node.op == OpKind::Mean {
                        gd[0] / len as f64
                    } else {
                        gd[0]
                    };
                    let target = self.accumulate(adj, parents[0]);
                    for t in target.data_mut() {
                        *t += scale;
                    }
                }
            }
            OpKind::Column(j) => {
                if wants(0) {
                    let target = self.accumulate(adj, parents[0]);
                    let cols = target.cols();
                    for (i, v) in gd.iter().enumerate() {
                        target.data_mut()[i * cols + j] += v;
                    }
                }
            }
            op => {
                if !wants(0) {
                    return Ok(());
                }
                let x = self.nodes[parents[0].0].value.data();
                let y = node.value.data();
                let target = self.accumulate(adj, parents[0]);
                let t = target.data_mut();
                match op {
                    OpKind::Tanh => {
                        for i in 0..t.len() {
                            t[i] += gd[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                    OpKind::Sin => {
                        for i in 0..t.len() {
                            t[i] += gd[i] * x[i].cos();
                        }
                    }
                    OpKind::Cos => {
                        for i in 0..t.len() {
                            t[i] -= gd[i] * x[i].sin();
                        }
                    }
                    OpKind::Exp => {
                        for i in 0..t.len() {
                            t[i] += gd[i] * y[i];
                        }
                    }
                    OpKind::Powi(n) => {
                        for i in 0..t.len() {
                            t[i] += gd[i] * n as f64 * x[i].powi(n - 1);
                        }
                    }
                    OpKind::Abs => {
                        for i in 0..t.len() {
                            t[i] += gd[i] * sign(x[i]);
                        }
                    }
                    OpKind::Square => {
                        for i in 0..t.len() {
                            t[i] += 2.0 * gd[i] * x[i];
                        }
                    }
                    OpKind::Scale(c) => {
                        for i in 0..t.len() {
                            t[i] += gd[i] * c;
                        }
                    }
                    OpKind::Shift(_) => {
                        for i in 0..t.len() {
                            t[i] += gd[i];
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
        Ok(())
    }
}

//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output values and the ids of its inputs. Node ids grow monotonically, so a
//! single reverse sweep over the node list is a valid topological order for
//! backpropagation. Parameters enter the graph as named leaves; `backward`
//! returns one gradient tensor per registered parameter (zero for parameters
//! the loss never reached). A tape is single-owner and is consumed by its
//! backward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Identity with gradient flow severed. The source id is kept for
    /// graph inspection.
    Detach(#[allow(dead_code)] NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `mul * x + add`, elementwise. The shift is constant, so only the
    /// factor matters in reverse.
    Affine { x: NodeId, mul: f64, #[allow(dead_code)] add: f64 },
    /// Matrix plus a per-row bias vector.
    AddRowBroadcast { x: NodeId, bias: NodeId },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// `ln(max(x, eps))`; gradient is zero where the clamp binds.
    LnClamped { x: NodeId, eps: f64 },
    SoftmaxVec(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Per-row max over columns; gradient routes to the first argmax.
    RowMax(NodeId),
    SelectRows { x: NodeId, indices: Vec<usize> },
    SelectRow { x: NodeId, index: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatVec(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    /// One element of a vector, kept as a `[1]` tensor.
    Pick { x: NodeId, index: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach(_) => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LnClamped { .. } => "ln_clamped",
            Op::SoftmaxVec(_) => "softmax_vec",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::RowMax(_) => "row_max",
            Op::SelectRows { .. } => "select_rows",
            Op::SelectRow { .. } => "select_row",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatVec(_) => "concat_vec",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::Pick { .. } => "pick",
        }
    }
}

struct Node {
    values: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name after a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

/// Records a forward pass and computes parameter gradients in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
    consumed: bool,
    poisoned: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            consumed: false,
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].values
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    fn push(&mut self, values: Tensor, op: Op, requires_grad: bool) -> NodeId {
        if self.poisoned.is_none() && !values.is_all_finite() {
            self.poisoned = Some(op.name().to_string());
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { values, op, requires_grad });
        id
    }

    /// Register (or fetch) a named trainable leaf. Repeated calls with the
    /// same name return the node created first, so a batch of instances
    /// shares one leaf per parameter and gradients accumulate across them.
    pub fn param(&mut self, name: &str, values: &Tensor) -> NodeId {
        if let Some(&id) = self.param_index.get(name) {
            return id;
        }
        let id = self.push(values.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        id
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, values: Tensor) -> NodeId {
        self.push(values, Op::Leaf, false)
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let values = self.value(x).clone();
        self.push(values, Op::Detach(x), false)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let values: Vec<f64> =
            va.values().iter().zip(vb.values()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_raw(va.shape().to_vec(), values);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let values: Vec<f64> =
            va.values().iter().zip(vb.values()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_raw(va.shape().to_vec(), values);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let values: Vec<f64> =
            va.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_raw(va.shape().to_vec(), values);
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let vx = self.value(x);
        let values: Vec<f64> = vx.values().iter().map(|v| mul * v + add).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), values);
        let rg = self.requires(x);
        self.push(t, Op::Affine { x, mul, add }, rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vx.rank(), 2, "add_row_broadcast expects a matrix");
        assert_eq!(vx.cols(), vb.numel(), "bias width mismatch");
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut values = vx.values().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] += vb.values()[c];
            }
        }
        let t = Tensor::from_raw(vec![rows, cols], values);
        let rg = self.requires(x) || self.requires(bias);
        self.push(t, Op::AddRowBroadcast { x, bias }, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 2, "matmul lhs must be a matrix");
        let (m, k) = (va.rows(), va.cols());
        let values = match vb.rank() {
            2 => {
                assert_eq!(vb.rows(), k, "matmul inner dim mismatch");
                let n = vb.cols();
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let arow = va.row(i);
                    for (p, &apv) in arow.iter().enumerate() {
                        if apv == 0.0 {
                            continue;
                        }
                        let brow = vb.row(p);
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += apv * bv;
                        }
                    }
                }
                Tensor::from_raw(vec![m, n], out)
            }
            1 => {
                assert_eq!(vb.numel(), k, "matmul vector length mismatch");
                let mut out = vec![0.0; m];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = va
                        .row(i)
                        .iter()
                        .zip(vb.values())
                        .map(|(x, y)| x * y)
                        .sum();
                }
                Tensor::from_raw(vec![m], out)
            }
            r => panic!("matmul rhs of rank {r}"),
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(values, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "transpose expects a matrix");
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c * rows + r] = vx.at(r, c);
            }
        }
        let t = Tensor::from_raw(vec![cols, rows], values);
        let rg = self.requires(x);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let values: Vec<f64> = vx.values().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), values);
        let rg = self.requires(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let values: Vec<f64> = vx.values().iter().map(|&v| v.tanh()).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), values);
        let rg = self.requires(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let values: Vec<f64> =
            vx.values().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), values);
        let rg = self.requires(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn ln_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let values: Vec<f64> = vx.values().iter().map(|&v| v.max(eps).ln()).collect();
        let t = Tensor::from_raw(vx.shape().to_vec(), values);
        let rg = self.requires(x);
        self.push(t, Op::LnClamped { x, eps }, rg)
    }

    pub fn softmax_vec(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 1, "softmax_vec expects a vector");
        assert!(vx.numel() > 0, "empty distribution");
        let t = Tensor::from_raw(vx.shape().to_vec(), softmax_slice(vx.values()));
        let rg = self.requires(x);
        self.push(t, Op::SoftmaxVec(x), rg)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "softmax_rows expects a matrix");
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            values.extend(softmax_slice(vx.row(r)));
        }
        let t = Tensor::from_raw(vec![rows, cols], values);
        let rg = self.requires(x);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(vx.rank(), 2, "layer_norm_rows expects a matrix");
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(vg.numel(), cols);
        assert_eq!(vb.numel(), cols);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ((&v, &g), &b) in row.iter().zip(vg.values()).zip(vb.values()) {
                values.push((v - mean) * inv_std * g + b);
            }
        }
        let t = Tensor::from_raw(vec![rows, cols], values);
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(t, Op::LayerNormRows { x, gamma, beta, eps }, rg)
    }

    /// Max over the columns of each row; ties resolve to the first index.
    pub fn row_max(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "row_max expects a matrix");
        let rows = vx.rows();
        let values: Vec<f64> = (0..rows)
            .map(|r| vx.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let t = Tensor::from_raw(vec![rows], values);
        let rg = self.requires(x);
        self.push(t, Op::RowMax(x), rg)
    }

    /// Gather rows of a matrix (used for embedding lookup; indices may repeat).
    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "select_rows expects a matrix");
        let cols = vx.cols();
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < vx.rows(), "row index {i} out of range");
            values.extend_from_slice(vx.row(i));
        }
        let t = Tensor::from_raw(vec![indices.len(), cols], values);
        let rg = self.requires(x);
        self.push(t, Op::SelectRows { x, indices: indices.to_vec() }, rg)
    }

    /// One row of a matrix as a vector.
    pub fn select_row(&mut self, x: NodeId, index: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "select_row expects a matrix");
        assert!(index < vx.rows(), "row index {index} out of range");
        let t = Tensor::from_raw(vec![vx.cols()], vx.row(index).to_vec());
        let rg = self.requires(x);
        self.push(t, Op::SelectRow { x, index }, rg)
    }

    /// Contiguous column slice of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2, "slice_cols expects a matrix");
        let (rows, cols) = (vx.rows(), vx.cols());
        assert!(start + len <= cols, "column slice out of range");
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let t = Tensor::from_raw(vec![rows, len], values);
        let rg = self.requires(x);
        self.push(t, Op::SliceCols { x, start, len }, rg)
    }

    pub fn concat_vec(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut values = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rank(), 1, "concat_vec expects vectors");
            values.extend_from_slice(vp.values());
        }
        let t = Tensor::from_raw(vec![values.len()], values);
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(t, Op::ConcatVec(parts.to_vec()), rg)
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut values = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
                values.extend_from_slice(vp.row(r));
            }
        }
        let t = Tensor::from_raw(vec![rows, total_cols], values);
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let t = Tensor::scalar(vx.values().iter().sum());
        let rg = self.requires(x);
        self.push(t, Op::Sum(x), rg)
    }

    /// One element of a vector, as a `[1]` tensor.
    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 1, "pick expects a vector");
        assert!(index < vx.numel(), "pick index out of range");
        let t = Tensor::scalar(vx.values()[index]);
        let rg = self.requires(x);
        self.push(t, Op::Pick { x, index }, rg)
    }

    /// Mean of a set of `[1]` tensors.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Inverted dropout recorded as a constant mask multiply. Identity in eval
    /// mode or at rate zero.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::numerics(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let scale = 1.0 / (1.0 - rate);
        let mask_values: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let mask = self.constant(Tensor::from_raw(shape, mask_values));
        Ok(self.mul(x, mask))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per registered
    /// parameter; parameters the loss never reached get zeros. Consumes the
    /// tape: a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::numerics("backward called twice on a consumed tape"));
        }
        self.consumed = true;
        if let Some(op) = &self.poisoned {
            return Err(Error::numerics(format!(
                "non-finite value produced by op '{op}' during forward pass"
            )));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::numerics("backward root must be a scalar"));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, id) in &self.params {
            let grad = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape().to_vec()));
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.accumulate(*a, grads, g.values());
                self.accumulate(*b, grads, g.values());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, g.values());
                let neg: Vec<f64> = g.values().iter().map(|v| -v).collect();
                self.accumulate(*b, grads, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .values()
                    .iter()
                    .zip(self.value(*b).values())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .values()
                    .iter()
                    .zip(self.value(*a).values())
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.accumulate(*a, grads, &da);
                self.accumulate(*b, grads, &db);
            }
            Op::Affine { x, mul, .. } => {
                let dx: Vec<f64> = g.values().iter().map(|gv| gv * mul).collect();
                self.accumulate(*x, grads, &dx);
            }
            Op::AddRowBroadcast { x, bias } => {
                self.accumulate(*x, grads, g.values());
                let cols = self.value(*bias).numel();
                let mut db = vec![0.0; cols];
                for (j, gv) in g.values().iter().enumerate() {
                    db[j % cols] += gv;
                }
                self.accumulate(*bias, grads, &db);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                match vb.rank() {
                    2 => {
                        let n = vb.cols();
                        // dA = G B^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g.values()[i * n + j] * vb.at(p, j);
                                }
                                da[i * k + p] = s;
                            }
                        }
                        // dB = A^T G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let arow = va.row(i);
                            let grow = &g.values()[i * n..(i + 1) * n];
                            for (p, &av) in arow.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                        self.accumulate(*a, grads, &da);
                        self.accumulate(*b, grads, &db);
                    }
                    1 => {
                        // y = A v: dA = g outer v, dv = A^T g
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let gv = g.values()[i];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] = gv * vb.values()[p];
                            }
                        }
                        let mut dv = vec![0.0; k];
                        for i in 0..m {
                            let gv = g.values()[i];
                            if gv == 0.0 {
                                continue;
                            }
                            for (p, d) in dv.iter_mut().enumerate() {
                                *d += gv * va.at(i, p);
                            }
                        }
                        self.accumulate(*a, grads, &da);
                        self.accumulate(*b, grads, &dv);
                    }
                    _ => unreachable!(),
                }
            }
            Op::Transpose(x) => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g.values()[c * rows + r];
                    }
                }
                self.accumulate(*x, grads, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .values()
                    .iter()
                    .zip(self.value(*x).values())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*x, grads, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> = g
                    .values()
                    .iter()
                    .zip(node.values.values())
                    .map(|(gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(*x, grads, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .values()
                    .iter()
                    .zip(node.values.values())
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accumulate(*x, grads, &dx);
            }
            Op::LnClamped { x, eps } => {
                let dx: Vec<f64> = g
                    .values()
                    .iter()
                    .zip(self.value(*x).values())
                    .map(|(gv, &xv)| if xv > *eps { gv / xv } else { 0.0 })
                    .collect();
                self.accumulate(*x, grads, &dx);
            }
            Op::SoftmaxVec(x) => {
                let y = node.values.values();
                let dot: f64 = g.values().iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                let dx: Vec<f64> =
                    g.values().iter().zip(y).map(|(gv, yv)| yv * (gv - dot)).collect();
                self.accumulate(*x, grads, &dx);
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = (node.values.rows(), node.values.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = node.values.row(r);
                    let gr = &g.values()[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*x, grads, &dx);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = vx.row(r);
                    let gr = &g.values()[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let norm: Vec<f64> =
                        row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gy: Vec<f64> =
                        gr.iter().zip(vg.values()).map(|(gv, gm)| gv * gm).collect();
                    let mean_gy = gy.iter().sum::<f64>() / cols as f64;
                    let mean_gy_norm =
                        gy.iter().zip(&norm).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dgamma[c] += gr[c] * norm[c];
                        dbeta[c] += gr[c];
                        dx[r * cols + c] =
                            (gy[c] - mean_gy - norm[c] * mean_gy_norm) * inv_std;
                    }
                }
                self.accumulate(*x, grads, &dx);
                self.accumulate(*gamma, grads, &dgamma);
                self.accumulate(*beta, grads, &dbeta);
            }
            Op::RowMax(x) => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = vx.row(r);
                    let mut best = 0;
                    for c in 1..cols {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    dx[r * cols + best] = g.values()[r];
                }
                self.accumulate(*x, grads, &dx);
            }
            Op::SelectRows { x, indices } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut dx = vec![0.0; vx.numel()];
                for (out_r, &src_r) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dx[src_r * cols + c] += g.values()[out_r * cols + c];
                    }
                }
                self.accumulate(*x, grads, &dx);
            }
            Op::SelectRow { x, index } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut dx = vec![0.0; vx.numel()];
                dx[index * cols..(index + 1) * cols].copy_from_slice(g.values());
                self.accumulate(*x, grads, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * cols + start + j] = g.values()[r * len + j];
                    }
                }
                self.accumulate(*x, grads, &dx);
            }
            Op::ConcatVec(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(p, grads, &g.values()[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.values.rows();
                let total = node.values.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w].copy_from_slice(
                            &g.values()[r * total + offset..r * total + offset + w],
                        );
                    }
                    self.accumulate(p, grads, &dp);
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = vec![g.values()[0]; n];
                self.accumulate(*x, grads, &dx);
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[*index] = g.values()[0];
                self.accumulate(*x, grads, &dx);
            }
        }
    }

    fn accumulate(&self, target: NodeId, grads: &mut [Option<Tensor>], delta: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(t) => {
                for (o, d) in t.values_mut().iter_mut().zip(delta) {
                    *o += d;
                }
            }
            slot @ None => {
                let shape = self.value(target).shape().to_vec();
                *slot = Some(Tensor::from_raw(shape, delta.to_vec()));
            }
        }
    }
}

fn softmax_slice(vals: &[f64]) -> Vec<f64> {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

impl Tensor {
    /// Internal constructor for op outputs: skips the finiteness scan (the
    /// tape tracks poisoning itself) but keeps the shape contract.
    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor::from_parts(shape, values)
    }
}

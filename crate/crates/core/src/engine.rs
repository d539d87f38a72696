//! Reverse-mode automatic differentiation over small dense 64-bit-float
//! matrices.
//!
//! A [`Graph`] is an append-only tape: creating a node evaluates it eagerly,
//! so every node's value is available while the graph is still being built
//! (the unrolled inner optimizer relies on this to read intermediate weights).
//! [`Graph::backward`] walks the tape once in reverse creation order, which
//! is a valid reverse topological order because parents always precede
//! children.
//!
//! Derivative conventions at kinks: `relu'(0) = 0` and `sqrt'(0) = 0`.
//! Finite-difference checks must stay away from those points.

use crate::linalg::{sigma_min_grad, WeightStack};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    DataLength { len: usize, rows: usize, cols: usize },
    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("sqrt: negative input entry {value}")]
    NegativeSqrt { value: f64 },
    #[error("sigma_min: expected a column vector compatible with buffer rows of length {expected}, got {rows}x{cols}")]
    SigmaMinShape { expected: usize, rows: usize, cols: usize },
    #[error("non-finite function value during gradient check")]
    NonFiniteValue,
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EngineError> {
        if data.len() != rows * cols {
            return Err(EngineError::DataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle into one [`Graph`]'s tape. Never reuse across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Div(NodeId, NodeId),
    Sum(NodeId),
    FrobSq(NodeId),
    Mean(NodeId),
    /// Smallest eigenvalue of `K = P^T P / rows(P)` where `P` stacks
    /// detached buffer rows above the live column vector `w` (as a row).
    /// Gradient flows only into `w`: `(2/rows) (w . v) v`.
    SigmaMinRow {
        w: NodeId,
        eigvec: Vec<f64>,
        inv_rows: f64,
        active: bool,
        degenerate: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by node. Unreached nodes hold
/// zero tensors.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

/// An append-only computation tape with eager forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor {
        rows: a.rows,
        cols: b.cols,
        data: out,
    }
}

// G * B^T, with G: m x n, B: p x n -> m x p
fn mm_abt(g: &Tensor, b: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.rows * b.rows];
    for i in 0..g.rows {
        for j in 0..b.rows {
            let grow = &g.data[i * g.cols..(i + 1) * g.cols];
            let brow = &b.data[j * b.cols..(j + 1) * b.cols];
            out[i * b.rows + j] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        rows: g.rows,
        cols: b.rows,
        data: out,
    }
}

// A^T * G, with A: m x n, G: m x p -> n x p
fn mm_atb(a: &Tensor, g: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.cols * g.cols];
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let grow = &g.data[i * g.cols..(i + 1) * g.cols];
        for (k, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[k * g.cols..(k + 1) * g.cols];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor {
        rows: a.cols,
        cols: g.cols,
        data: out,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Parameter leaf: receives a gradient in backward passes.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Constant leaf: participates in forward values only.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), EngineError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !x.same_shape(y) {
            return Err(EngineError::ShapeMismatch {
                op,
                lhs_rows: x.rows,
                lhs_cols: x.cols,
                rhs_rows: y.rows,
                rhs_cols: y.cols,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.cols != y.rows {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs_rows: x.rows,
                lhs_cols: x.cols,
                rhs_rows: y.rows,
                rhs_cols: y.cols,
            });
        }
        let value = mm(x, y);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut data = vec![0.0; x.data.len()];
        for i in 0..x.rows {
            for j in 0..x.cols {
                data[j * x.rows + i] = x.data[i * x.cols + j];
            }
        }
        let value = Tensor {
            rows: x.cols,
            cols: x.rows,
            data,
        };
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_shapes("add", a, b)?;
        let value = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data,
            }
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_shapes("sub", a, b)?;
        let value = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data,
            }
        };
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise division; denominators must be nonzero for finite output.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.binary_shapes("div", a, b)?;
        let value = {
            let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let data = x.data.iter().zip(&y.data).map(|(p, q)| p / q).collect();
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data,
            }
        };
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| c * v).collect(),
        };
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| v.tanh()).collect(),
        };
        self.push(value, Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| v * v).collect(),
        };
        self.push(value, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        let x = &self.nodes[a.0].value;
        if let Some(&bad) = x.data.iter().find(|v| **v < 0.0) {
            return Err(EngineError::NegativeSqrt { value: bad });
        }
        let value = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|v| v.sqrt()).collect(),
        };
        Ok(self.push(value, Op::Sqrt(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Squared Frobenius norm (sum of squared entries).
    pub fn frob_sq(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data.iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(total), Op::FrobSq(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let total: f64 = x.data.iter().sum();
        let value = Tensor::scalar(total / x.data.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Smallest eigenvalue of `K = P^T P / rows` where `P` stacks
    /// `detached_rows` above `w` transposed into a row.
    ///
    /// When `P` has fewer rows than columns the eigenvalue is identically
    /// zero in a neighborhood, so the node holds value 0 with zero gradient.
    /// Gradient flows only through `w`, using the first-order eigenvalue
    /// perturbation `(2/rows) (w . v) v` with `v` frozen at the forward pass.
    pub fn sigma_min_row(
        &mut self,
        w: NodeId,
        detached_rows: &[Vec<f64>],
    ) -> Result<NodeId, EngineError> {
        let wv = &self.nodes[w.0].value;
        let dim = wv.rows;
        if wv.cols != 1 || detached_rows.iter().any(|r| r.len() != dim) {
            return Err(EngineError::SigmaMinShape {
                expected: detached_rows.first().map_or(dim, |r| r.len()),
                rows: wv.rows,
                cols: wv.cols,
            });
        }
        let n_rows = detached_rows.len() + 1;
        if n_rows < dim {
            let op = Op::SigmaMinRow {
                w,
                eigvec: vec![0.0; dim],
                inv_rows: 0.0,
                active: false,
                degenerate: true,
            };
            return Ok(self.push(Tensor::scalar(0.0), op));
        }
        let mut rows: Vec<Vec<f64>> = detached_rows.to_vec();
        rows.push(wv.data.clone());
        let stack = WeightStack::from_rows(&rows).expect("rows are finite and non-empty");
        let info = sigma_min_grad(&stack, n_rows);
        let op = Op::SigmaMinRow {
            w,
            eigvec: info.eigvec,
            inv_rows: 1.0 / n_rows as f64,
            active: true,
            degenerate: info.degenerate,
        };
        Ok(self.push(Tensor::scalar(info.value), op))
    }

    /// Degeneracy flag of a `sigma_min_row` node, `None` for other ops.
    pub fn sigma_min_degenerate(&self, id: NodeId) -> Option<bool> {
        match &self.nodes[id.0].op {
            Op::SigmaMinRow { degenerate, .. } => Some(*degenerate),
            _ => None,
        }
    }

    /// Reverse-mode accumulation from a scalar root. Each reachable node is
    /// visited exactly once; gradients add over fan-out.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, EngineError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.shape() != (1, 1) {
            return Err(EngineError::NonScalarRoot {
                rows: root_val.rows,
                cols: root_val.cols,
            });
        }

        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Div(a, b) => {
                    stack.push(a.0);
                    stack.push(b.0);
                }
                Op::Transpose(a)
                | Op::Scale(a, _)
                | Op::Relu(a)
                | Op::Tanh(a)
                | Op::Square(a)
                | Op::Sqrt(a)
                | Op::Sum(a)
                | Op::FrobSq(a)
                | Op::Mean(a) => stack.push(a.0),
                Op::SigmaMinRow { w, .. } => stack.push(w.0),
            }
        }

        // a node carries gradient only if some requires-grad leaf feeds it;
        // constant subtrees are skipped entirely
        let mut needs_grad = vec![false; self.nodes.len()];
        for i in 0..self.nodes.len() {
            needs_grad[i] = match &self.nodes[i].op {
                Op::Leaf { requires_grad } => *requires_grad,
                Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Div(a, b) => {
                    needs_grad[a.0] || needs_grad[b.0]
                }
                Op::Transpose(a)
                | Op::Scale(a, _)
                | Op::Relu(a)
                | Op::Tanh(a)
                | Op::Square(a)
                | Op::Sqrt(a)
                | Op::Sum(a)
                | Op::FrobSq(a)
                | Op::Mean(a) => needs_grad[a.0],
                Op::SigmaMinRow { w, .. } => needs_grad[w.0],
            };
        }

        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[root.0].data[0] = 1.0;

        for i in (0..=root.0).rev() {
            if !reachable[i] || !needs_grad[i] {
                continue;
            }
            // take the accumulated gradient; leaves keep theirs
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(0, 0));
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = g;
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs_grad[a.0] {
                        let da = mm_abt(&g, &self.nodes[b.0].value);
                        accumulate(&mut grads[a.0], &da);
                    }
                    if needs_grad[b.0] {
                        let db = mm_atb(&self.nodes[a.0].value, &g);
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Transpose(a) => {
                    let target = &mut grads[a.0];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            target.data[c * g.rows + r] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    if needs_grad[a.0] {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if needs_grad[b.0] {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs_grad[a.0] {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if needs_grad[b.0] {
                        for (t, s) in grads[b.0].data.iter_mut().zip(&g.data) {
                            *t -= s;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if needs_grad[a.0] {
                        let target = &mut grads[a.0];
                        for k in 0..g.data.len() {
                            target.data[k] += g.data[k] / bv.data[k];
                        }
                    }
                    if needs_grad[b.0] {
                        let target = &mut grads[b.0];
                        for k in 0..g.data.len() {
                            target.data[k] -= g.data[k] * av.data[k] / (bv.data[k] * bv.data[k]);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let target = &mut grads[a.0];
                    for (t, s) in target.data.iter_mut().zip(&g.data) {
                        *t += c * s;
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let target = &mut grads[a.0];
                    for k in 0..g.data.len() {
                        if av.data[k] > 0.0 {
                            target.data[k] += g.data[k];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let yv = &self.nodes[i].value;
                    let target = &mut grads[a.0];
                    for k in 0..g.data.len() {
                        target.data[k] += g.data[k] * (1.0 - yv.data[k] * yv.data[k]);
                    }
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    let target = &mut grads[a.0];
                    for k in 0..g.data.len() {
                        target.data[k] += g.data[k] * 2.0 * av.data[k];
                    }
                }
                Op::Sqrt(a) => {
                    let yv = &self.nodes[i].value;
                    let target = &mut grads[a.0];
                    for k in 0..g.data.len() {
                        // subgradient 0 at the origin
                        if yv.data[k] > 0.0 {
                            target.data[k] += g.data[k] * 0.5 / yv.data[k];
                        }
                    }
                }
                Op::Sum(a) => {
                    let s = g.data[0];
                    for t in grads[a.0].data.iter_mut() {
                        *t += s;
                    }
                }
                Op::FrobSq(a) => {
                    let s = g.data[0];
                    let av = &self.nodes[a.0].value;
                    let target = &mut grads[a.0];
                    for k in 0..av.data.len() {
                        target.data[k] += s * 2.0 * av.data[k];
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.data.len() as f64;
                    let s = g.data[0] / n;
                    for t in grads[a.0].data.iter_mut() {
                        *t += s;
                    }
                }
                Op::SigmaMinRow {
                    w,
                    eigvec,
                    inv_rows,
                    active,
                    ..
                } => {
                    if *active {
                        let s = g.data[0];
                        let wv = &self.nodes[w.0].value;
                        let wv_dot_v: f64 =
                            wv.data.iter().zip(eigvec).map(|(a, b)| a * b).sum();
                        let coeff = s * 2.0 * inv_rows * wv_dot_v;
                        let target = &mut grads[w.0];
                        for (t, v) in target.data.iter_mut().zip(eigvec) {
                            *t += coeff * v;
                        }
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(target: &mut Tensor, src: &Tensor) {
    for (t, s) in target.data.iter_mut().zip(&src.data) {
        *t += s;
    }
}

/// Maximum relative error between the analytic gradient of a scalar graph
/// function and central finite differences.
///
/// `build` must construct the same scalar function of a column-vector leaf
/// each call. The per-coordinate step is `step * max(1, |x_i|)` and the
/// relative error denominator is `max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(build: F, point: &[f64], step: f64) -> Result<f64, EngineError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, EngineError>,
{
    let mut graph = Graph::new();
    let leaf = graph.leaf(Tensor::column(point));
    let root = build(&mut graph, leaf)?;
    let root_val = graph.value(root);
    if root_val.shape() != (1, 1) {
        return Err(EngineError::NonScalarRoot {
            rows: root_val.rows(),
            cols: root_val.cols(),
        });
    }
    if !root_val.item().is_finite() {
        return Err(EngineError::NonFiniteValue);
    }
    let grads = graph.backward(root)?;
    let analytic = grads.get(leaf).data().to_vec();

    let eval = |x: &[f64]| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::column(x));
        let root = build(&mut g, leaf)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(EngineError::NonFiniteValue);
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let h = step * point[i].abs().max(1.0);
        work[i] = point[i] + h;
        let plus = eval(&work)?;
        work[i] = point[i] - h;
        let minus = eval(&work)?;
        work[i] = point[i];
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

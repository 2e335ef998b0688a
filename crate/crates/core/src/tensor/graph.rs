use std::cell::{Ref, RefCell};
use std::fmt;

use super::mat::dot;
use super::{Mat, TensorError, NORM_EPS};

pub type NodeId = usize;

/// Which entries a reduction folds together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Every entry, giving a `1 × 1` result.
    All,
    /// Each row separately, giving an `r × 1` column.
    Rows,
    /// Each column separately, giving a `1 × c` row.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Reduce(NodeId, ReduceKind, Axis),
    Transpose(NodeId),
    HConcat(Vec<NodeId>),
    VConcat(Vec<NodeId>),
    Slice { input: NodeId, row0: usize, col0: usize },
    AddRowBias(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    RowDot(NodeId, NodeId),
    RowCosine(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::Reduce(..) => "reduce",
            Op::Transpose(..) => "transpose",
            Op::HConcat(..) => "hconcat",
            Op::VConcat(..) => "vconcat",
            Op::Slice { .. } => "slice",
            Op::AddRowBias(..) => "add_row_bias",
            Op::MulCol(..) => "mul_col",
            Op::RowDot(..) => "row_dot",
            Op::RowCosine(..) => "row_cosine",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    grad: Option<Mat>,
}

/// Define-by-run differentiation graph.
///
/// Nodes are appended in evaluation order, so insertion order is a
/// topological order. A graph is built fresh for every forward pass and
/// is confined to one thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&self, value: Mat) -> Tensor<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Mat) -> Tensor<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.constant(Mat::scalar(value))
    }

    /// Kind name of every node, in topological order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Tensor { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("value", &*self.graph.value(self.id))
            .finish()
    }
}

type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, a: &Mat, b: &Mat) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl<'g> Tensor<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Mat {
        self.graph.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.graph.value(self.id))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.value(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        self.graph.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Gradient stored by the last [`Tensor::backward`], if this node was
    /// reached.
    pub fn grad(&self) -> Option<Mat> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    fn same_graph(&self, other: &Tensor<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "tensors belong to different graphs"
        );
    }

    fn unary(&self, value: Mat, op: Op) -> Tensor<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Tensor<'g>, value: Mat, op: Op) -> Tensor<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn same_shape(&self, other: &Tensor<'g>, op: &'static str) -> Result<()> {
        self.same_graph(other);
        let a = self.graph.value(self.id);
        let b = self.graph.value(other.id);
        if a.shape() != b.shape() {
            return Err(shape_err(op, &a, &b));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(other);
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            if a.cols() != b.rows() {
                return Err(shape_err("matmul", &a, &b));
            }
            a.matmul(&b)
        };
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    fn zip_op(
        &self,
        other: &Tensor<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor<'g>> {
        self.same_shape(other, name)?;
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            a.zip_map(&b, f)
        };
        Ok(self.binary(other, value, op))
    }

    pub fn add(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.zip_op(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.zip_op(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.zip_op(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise quotient; every denominator must be nonzero.
    pub fn div(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_shape(other, "div")?;
        if other.with_value(|b| b.data().contains(&0.0)) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "zero denominator".into(),
            });
        }
        self.zip_op(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(|v| v * factor));
        self.unary(value, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(|v| v + offset));
        self.unary(value, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(|v| -v));
        self.unary(value, Op::Neg(self.id))
    }

    pub fn tanh(&self) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(f64::tanh));
        self.unary(value, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(|v| v.max(0.0)));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(f64::exp));
        self.unary(value, Op::Exp(self.id))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self) -> Result<Tensor<'g>> {
        if let Some(bad) = self.with_value(|a| a.data().iter().copied().find(|&v| v <= 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.with_value(|a| a.map(f64::ln));
        Ok(self.unary(value, Op::Log(self.id)))
    }

    /// Square root of nonnegative inputs. The derivative at 0 is taken
    /// as 0.
    pub fn sqrt(&self) -> Result<Tensor<'g>> {
        if let Some(bad) = self.with_value(|a| a.data().iter().copied().find(|&v| v < 0.0)) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let value = self.with_value(|a| a.map(f64::sqrt));
        Ok(self.unary(value, Op::Sqrt(self.id)))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<'g> {
        let value = self.with_value(|a| a.map(softplus));
        self.unary(value, Op::Softplus(self.id))
    }

    pub fn square(&self) -> Tensor<'g> {
        self.mul(self).expect("same shape")
    }

    pub fn reduce(&self, kind: ReduceKind, axis: Axis) -> Tensor<'g> {
        let value = self.with_value(|a| {
            let (r, c) = a.shape();
            let mut out = match axis {
                Axis::All => Mat::scalar(a.data().iter().sum()),
                Axis::Rows => Mat::column((0..r).map(|i| a.row(i).iter().sum()).collect()),
                Axis::Cols => {
                    let mut out = Mat::zeros(1, c);
                    for i in 0..r {
                        for (o, v) in out.data_mut().iter_mut().zip(a.row(i)) {
                            *o += v;
                        }
                    }
                    out
                }
            };
            if kind == ReduceKind::Mean {
                let n = reduce_count(axis, r, c);
                if n > 0 {
                    out = out.map(|v| v / n as f64);
                }
            }
            out
        });
        self.unary(value, Op::Reduce(self.id, kind, axis))
    }

    pub fn sum(&self) -> Tensor<'g> {
        self.reduce(ReduceKind::Sum, Axis::All)
    }

    pub fn mean(&self) -> Tensor<'g> {
        self.reduce(ReduceKind::Mean, Axis::All)
    }

    pub fn transpose(&self) -> Tensor<'g> {
        let value = self.with_value(Mat::transpose);
        self.unary(value, Op::Transpose(self.id))
    }

    /// Side-by-side concatenation; all parts need the same row count.
    pub fn hconcat(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().expect("hconcat of nothing");
        let graph = first.graph;
        let value = {
            let rows = first.rows();
            let vals: Vec<Ref<'_, Mat>> = parts
                .iter()
                .map(|p| {
                    first.same_graph(p);
                    graph.value(p.id)
                })
                .collect();
            if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
                return Err(shape_err("hconcat", &vals[0], bad));
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                let mut offset = 0;
                for v in &vals {
                    out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                    offset += v.cols();
                }
            }
            out
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(value, Op::HConcat(ids), rg))
    }

    /// Stacked concatenation; all parts need the same column count.
    pub fn vconcat(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().expect("vconcat of nothing");
        let graph = first.graph;
        let value = {
            let cols = first.cols();
            let vals: Vec<Ref<'_, Mat>> = parts
                .iter()
                .map(|p| {
                    first.same_graph(p);
                    graph.value(p.id)
                })
                .collect();
            if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
                return Err(shape_err("vconcat", &vals[0], bad));
            }
            let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            let rows = vals.iter().map(|v| v.rows()).sum();
            Mat::from_vec(rows, cols, data)?
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(value, Op::VConcat(ids), rg))
    }

    /// Joins two row vectors end to end.
    pub fn concat(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.expect_vector("concat")?;
        other.expect_vector("concat")?;
        Tensor::hconcat(&[*self, *other])
    }

    pub fn slice(&self, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Tensor<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            if row0 + rows > a.rows() || col0 + cols > a.cols() {
                return Err(TensorError::Shape {
                    op: "slice",
                    left: a.shape(),
                    right: (row0 + rows, col0 + cols),
                });
            }
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                out.row_mut(r)
                    .copy_from_slice(&a.row(row0 + r)[col0..col0 + cols]);
            }
            out
        };
        Ok(self.unary(
            value,
            Op::Slice {
                input: self.id,
                row0,
                col0,
            },
        ))
    }

    pub fn slice_cols(&self, col0: usize, cols: usize) -> Result<Tensor<'g>> {
        self.slice(0, self.rows(), col0, cols)
    }

    pub fn row(&self, r: usize) -> Result<Tensor<'g>> {
        self.slice(r, 1, 0, self.cols())
    }

    /// Adds a `1 × c` bias to every row of an `r × c` tensor.
    pub fn add_row_bias(&self, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(bias);
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(bias.id);
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(shape_err("add_row_bias", &a, &b));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            out
        };
        Ok(self.binary(bias, value, Op::AddRowBias(self.id, bias.id)))
    }

    /// Scales row `i` of an `r × c` tensor by entry `i` of an `r × 1`
    /// column.
    pub fn mul_col(&self, col: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(col);
        let value = {
            let a = self.graph.value(self.id);
            let s = self.graph.value(col.id);
            if s.cols() != 1 || s.rows() != a.rows() {
                return Err(shape_err("mul_col", &a, &s));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                let k = s.get(r, 0);
                out.row_mut(r).iter_mut().for_each(|v| *v *= k);
            }
            out
        };
        Ok(self.binary(col, value, Op::MulCol(self.id, col.id)))
    }

    /// Per-row inner products of two equally shaped tensors, as a column.
    pub fn row_dot(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_shape(other, "row_dot")?;
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            Mat::column((0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect())
        };
        Ok(self.binary(other, value, Op::RowDot(self.id, other.id)))
    }

    /// Per-row cosine similarity. Rows with norm at or below
    /// [`NORM_EPS`] are rejected.
    pub fn row_cosine(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_shape(other, "row_cosine")?;
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            let mut out = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let (ra, rb) = (a.row(r), b.row(r));
                let na = dot(ra, ra).sqrt();
                let nb = dot(rb, rb).sqrt();
                let n = na.min(nb);
                if n <= NORM_EPS || !n.is_finite() {
                    return Err(TensorError::Degenerate {
                        op: "cosine",
                        row: r,
                        norm: n,
                    });
                }
                out.push(dot(ra, rb) / (na * nb));
            }
            Mat::column(out)
        };
        Ok(self.binary(other, value, Op::RowCosine(self.id, other.id)))
    }

    fn expect_vector(&self, op: &'static str) -> Result<()> {
        let shape = self.shape();
        if shape.0 != 1 {
            return Err(TensorError::NotVector { op, shape });
        }
        Ok(())
    }

    /// Inner product of two row vectors.
    pub fn dot(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.expect_vector("dot")?;
        other.expect_vector("dot")?;
        self.row_dot(other)
    }

    /// Cosine similarity of two row vectors.
    pub fn cosine(&self, other: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.expect_vector("cosine")?;
        other.expect_vector("cosine")?;
        self.row_cosine(other)
    }

    pub fn softmax_rows(&self) -> Tensor<'g> {
        let value = self.with_value(|a| {
            let mut out = a.clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        });
        self.unary(value, Op::SoftmaxRows(self.id))
    }

    /// Row-wise log-softmax with the max shift applied.
    pub fn log_softmax_rows(&self) -> Tensor<'g> {
        let value = self.with_value(|a| {
            let mut out = a.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        });
        self.unary(value, Op::LogSoftmaxRows(self.id))
    }

    /// Reverse-mode sweep from this scalar. Every node that requires a
    /// gradient and is reachable from `self` ends up holding
    /// `∂self/∂node`; previously stored gradients are replaced.
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.id + 1];
        {
            let nodes = self.graph.nodes.borrow();
            if nodes[self.id].requires_grad {
                grads[self.id] = Some(Mat::scalar(1.0));
            }
            for id in (0..=self.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                propagate(&nodes, node, &g, &mut grads);
                grads[id] = Some(g);
            }
        }
        let mut nodes = self.graph.nodes.borrow_mut();
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        for (node, g) in nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }
}

fn reduce_count(axis: Axis, r: usize, c: usize) -> usize {
    match axis {
        Axis::All => r * c,
        Axis::Rows => c,
        Axis::Cols => r,
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node], id: NodeId, g: Mat) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
    let val = |id: NodeId| &nodes[id].value;
    let wants = |id: NodeId| nodes[id].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if wants(a) {
                accumulate(grads, nodes, a, g.matmul_t(val(b)));
            }
            if wants(b) {
                accumulate(grads, nodes, b, val(a).t_matmul(g));
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.map(|v| -v));
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                accumulate(grads, nodes, a, g.zip_map(val(b), |g, b| g * b));
            }
            if wants(b) {
                accumulate(grads, nodes, b, g.zip_map(val(a), |g, a| g * a));
            }
        }
        &Op::Div(a, b) => {
            if wants(a) {
                accumulate(grads, nodes, a, g.zip_map(val(b), |g, b| g / b));
            }
            if wants(b) {
                let ga = g.zip_map(y, |g, q| g * q);
                accumulate(grads, nodes, b, ga.zip_map(val(b), |gq, b| -gq / b));
            }
        }
        &Op::Scale(a, k) => accumulate(grads, nodes, a, g.map(|v| v * k)),
        &Op::AddScalar(a) => accumulate(grads, nodes, a, g.clone()),
        &Op::Neg(a) => accumulate(grads, nodes, a, g.map(|v| -v)),
        &Op::Tanh(a) => accumulate(grads, nodes, a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
        &Op::Relu(a) => accumulate(
            grads,
            nodes,
            a,
            g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        &Op::Exp(a) => accumulate(grads, nodes, a, g.zip_map(y, |g, e| g * e)),
        &Op::Log(a) => accumulate(grads, nodes, a, g.zip_map(val(a), |g, x| g / x)),
        &Op::Sqrt(a) => accumulate(
            grads,
            nodes,
            a,
            g.zip_map(y, |g, s| if s > 0.0 { g / (2.0 * s) } else { 0.0 }),
        ),
        &Op::Softplus(a) => accumulate(grads, nodes, a, g.zip_map(val(a), |g, x| g * sigmoid(x))),
        &Op::Reduce(a, kind, axis) => {
            let (r, c) = val(a).shape();
            let scale = match kind {
                ReduceKind::Sum => 1.0,
                ReduceKind::Mean => {
                    let n = reduce_count(axis, r, c);
                    if n == 0 {
                        return;
                    }
                    1.0 / n as f64
                }
            };
            let mut out = Mat::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    let up = match axis {
                        Axis::All => g.item(),
                        Axis::Rows => g.get(i, 0),
                        Axis::Cols => g.get(0, j),
                    };
                    out.set(i, j, up * scale);
                }
            }
            accumulate(grads, nodes, a, out);
        }
        &Op::Transpose(a) => accumulate(grads, nodes, a, g.transpose()),
        Op::HConcat(ids) => {
            let mut offset = 0;
            for &id in ids {
                let (r, c) = val(id).shape();
                if wants(id) {
                    let mut part = Mat::zeros(r, c);
                    for i in 0..r {
                        part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    accumulate(grads, nodes, id, part);
                }
                offset += c;
            }
        }
        Op::VConcat(ids) => {
            let mut offset = 0;
            for &id in ids {
                let (r, c) = val(id).shape();
                if wants(id) {
                    let data = g.data()[offset * c..(offset + r) * c].to_vec();
                    accumulate(grads, nodes, id, Mat::from_vec(r, c, data).expect("shape"));
                }
                offset += r;
            }
        }
        &Op::Slice { input, row0, col0 } => {
            let (r, c) = val(input).shape();
            let mut out = Mat::zeros(r, c);
            for i in 0..g.rows() {
                out.row_mut(row0 + i)[col0..col0 + g.cols()].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, input, out);
        }
        &Op::AddRowBias(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            if wants(b) {
                let mut gb = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, nodes, b, gb);
            }
        }
        &Op::MulCol(a, s) => {
            let (av, sv) = (val(a), val(s));
            if wants(a) {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let k = sv.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|v| *v *= k);
                }
                accumulate(grads, nodes, a, ga);
            }
            if wants(s) {
                let gs = (0..g.rows()).map(|i| dot(g.row(i), av.row(i))).collect();
                accumulate(grads, nodes, s, Mat::column(gs));
            }
        }
        &Op::RowDot(a, b) => {
            let (av, bv) = (val(a), val(b));
            let scaled = |other: &Mat| {
                let mut out = other.clone();
                for i in 0..out.rows() {
                    let k = g.get(i, 0);
                    out.row_mut(i).iter_mut().for_each(|v| *v *= k);
                }
                out
            };
            if wants(a) {
                accumulate(grads, nodes, a, scaled(bv));
            }
            if wants(b) {
                accumulate(grads, nodes, b, scaled(av));
            }
        }
        &Op::RowCosine(a, b) => {
            let (av, bv) = (val(a), val(b));
            let mut ga = Mat::zeros(av.rows(), av.cols());
            let mut gb = Mat::zeros(bv.rows(), bv.cols());
            for i in 0..av.rows() {
                let (ra, rb) = (av.row(i), bv.row(i));
                let na = dot(ra, ra).sqrt();
                let nb = dot(rb, rb).sqrt();
                let cos = y.get(i, 0);
                let up = g.get(i, 0);
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                for (k, out) in ga.row_mut(i).iter_mut().enumerate() {
                    *out = up * (rb[k] / (na * nb) - cos * ra[k] / (na * na));
                }
                for (k, out) in gb.row_mut(i).iter_mut().enumerate() {
                    *out = up * (ra[k] / (na * nb) - cos * rb[k] / (nb * nb));
                }
            }
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        &Op::SoftmaxRows(a) => {
            let mut ga = Mat::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let inner = dot(g.row(i), y.row(i));
                for (k, out) in ga.row_mut(i).iter_mut().enumerate() {
                    *out = y.get(i, k) * (g.get(i, k) - inner);
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        &Op::LogSoftmaxRows(a) => {
            let mut ga = Mat::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let total: f64 = g.row(i).iter().sum();
                for (k, out) in ga.row_mut(i).iter_mut().enumerate() {
                    *out = g.get(i, k) - y.get(i, k).exp() * total;
                }
            }
            accumulate(grads, nodes, a, ga);
        }
    }
}

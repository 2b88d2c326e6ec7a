//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Node ids
//! grow monotonically, so the tape order is already a topological order and
//! [`Graph::backward`] only has to walk it once in reverse.
//!
//! Elementwise operations broadcast only when one operand holds a single value.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("objective is not finite at probe {probe} (parameter {index})")]
    NonFiniteProbe { probe: usize, index: usize },
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Dense row-major tensor. `values.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = AutodiffError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.values)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            values: t.values,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::BadLength {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// True for shapes `[]` and `[1]`, the only shapes accepted as a `backward` root.
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.len() <= 1
    }

    /// First value; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.values.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn as_matrix(&self, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Fault injection hooks for verifying that gradient checks catch broken rules.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// `sin` backward uses `-cos` instead of `cos`.
    NegatedSinDerivative,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Sin(usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Single-threaded; build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    fault: Option<Fault>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::param`]. `None` when the root
    /// does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of the leaf's shape when absent.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Returns gradients for differentiable leaves.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(root.graph, self),
            "root belongs to another graph"
        );
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_value.shape.clone()));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        adjoint[root.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..=root.id).rev() {
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let value = &node.value;
            let mut send = |target: usize, contribution: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut adjoint[target] {
                    Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor {
                        shape: value.shape.clone(),
                        values: g,
                    });
                }
                Op::Add(a, b) => {
                    send(a, reduce_broadcast(&g, nodes[a].value.numel()));
                    send(b, reduce_broadcast(&g, nodes[b].value.numel()));
                }
                Op::Sub(a, b) => {
                    send(a, reduce_broadcast(&g, nodes[a].value.numel()));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    send(b, reduce_broadcast(&neg, nodes[b].value.numel()));
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a].value.values;
                    let bv = &nodes[b].value.values;
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * pick(bv, k))
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * pick(av, k))
                        .collect();
                    send(a, reduce_broadcast(&ga, av.len()));
                    send(b, reduce_broadcast(&gb, bv.len()));
                }
                Op::MatMul(a, b) => {
                    let at = &nodes[a].value;
                    let bt = &nodes[b].value;
                    let (m, k) = (at.shape[0], at.shape[1]);
                    let n = bt.shape[1];
                    if nodes[a].requires_grad {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bt.values[p * n..(p + 1) * n];
                                ga[i * k + p] = dot(grow, brow);
                            }
                        }
                        send(a, ga);
                    }
                    if nodes[b].requires_grad {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = at.values[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let out = &mut gb[p * n..(p + 1) * n];
                                out.iter_mut().zip(grow).for_each(|(o, gv)| *o += aip * gv);
                            }
                        }
                        send(b, gb);
                    }
                }
                Op::Sum(a) => {
                    send(a, vec![g[0]; nodes[a].value.numel()]);
                }
                Op::Mean(a) => {
                    let n = nodes[a].value.numel();
                    send(a, vec![g[0] / n as f64; n]);
                }
                Op::Square(a) => {
                    let av = &nodes[a].value.values;
                    send(a, g.iter().zip(av).map(|(gk, x)| 2.0 * x * gk).collect());
                }
                Op::Sin(a) => {
                    let av = &nodes[a].value.values;
                    let sign = match self.fault {
                        Some(Fault::NegatedSinDerivative) => -1.0,
                        None => 1.0,
                    };
                    send(
                        a,
                        g.iter()
                            .zip(av)
                            .map(|(gk, x)| sign * x.cos() * gk)
                            .collect(),
                    );
                }
                Op::Scale(a, s) => {
                    send(a, g.iter().map(|gk| gk * s).collect());
                }
                Op::AddRow(a, row) => {
                    let cols = nodes[row].value.numel();
                    let mut grow = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        grow.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                    send(a, g);
                    send(row, grow);
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a].value.shape[0], nodes[a].value.shape[1]);
                    // value is c × r; map back to r × c
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    send(a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let src = &nodes[a].value;
                    let (rows, cols) = (src.shape[0], src.shape[1]);
                    let w = end - start;
                    let mut ga = vec![0.0; rows * cols];
                    for i in 0..rows {
                        ga[i * cols + start..i * cols + end]
                            .copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    send(a, ga);
                }
                Op::Reshape(a) => send(a, g),
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn pick(values: &[f64], k: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[k]
    }
}

fn reduce_broadcast(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            values,
        });
    }
    if b.numel() == 1 {
        let y = b.values[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.numel() == 1 {
        let x = a.values[0];
        return Ok(b.map(|y| f(x, y)));
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

/// Plain matrix product, shared by the graph op and value-only forward paths.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (m, k) = a.as_matrix("matmul", b)?;
    let (k2, n) = b.as_matrix("matmul", a).map_err(|_| mismatch())?;
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.values[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.values[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        values: out,
    })
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Copy of the node's current value.
    pub fn value(&self) -> Tensor {
        (*self.graph.value(self.id)).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.graph.value(self.id).item()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires_grad(self.id);
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires_grad(self.id) || self.graph.requires_grad(other.id);
        self.graph.push(value, op, rg)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = elementwise(
            "add",
            &self.graph.value(self.id),
            &self.graph.value(other.id),
            |x, y| x + y,
        )?;
        Ok(self.binary(&other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = elementwise(
            "sub",
            &self.graph.value(self.id),
            &self.graph.value(other.id),
            |x, y| x - y,
        )?;
        Ok(self.binary(&other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = elementwise(
            "mul",
            &self.graph.value(self.id),
            &self.graph.value(other.id),
            |x, y| x * y,
        )?;
        Ok(self.binary(&other, v, Op::Mul(self.id, other.id)))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let v = matmul_values(&self.graph.value(self.id), &self.graph.value(other.id))?;
        Ok(self.binary(&other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn sum(&self) -> Var<'g> {
        let total = self.graph.value(self.id).values.iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let t = self.graph.value(self.id);
        let mean = t.values.iter().sum::<f64>() / t.numel() as f64;
        self.unary(Tensor::scalar(mean), Op::Mean(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        let v = self.graph.value(self.id).map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sin(&self) -> Var<'g> {
        let v = self.graph.value(self.id).map(f64::sin);
        self.unary(v, Op::Sin(self.id))
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let v = self.graph.value(self.id).map(|x| x * factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    /// Adds `row` (shape `[n]` or `[1, n]`) to every row of a `[m, n]` matrix.
    pub fn add_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&row);
        let a = self.graph.value(self.id);
        let r = self.graph.value(row.id);
        if a.shape.len() != 2 || r.numel() != a.shape[1] || r.shape.len() > 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: a.shape.clone(),
                rhs: r.shape.clone(),
            });
        }
        let n = a.shape[1];
        let mut values = a.values.clone();
        for chunk in values.chunks_mut(n) {
            chunk.iter_mut().zip(&r.values).for_each(|(x, b)| *x += b);
        }
        let v = Tensor {
            shape: a.shape.clone(),
            values,
        };
        Ok(self.binary(&row, v, Op::AddRow(self.id, row.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let a = self.graph.value(self.id);
        if a.shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a matrix, got shape {:?}", a.shape),
            });
        }
        let (r, c) = (a.shape[0], a.shape[1]);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = a.values[i * c + j];
            }
        }
        let v = Tensor {
            shape: vec![c, r],
            values,
        };
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.graph.value(self.id);
        if a.shape.len() != 2 || start > end || end > a.shape[1] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                reason: format!(
                    "columns {start}..{end} out of range for shape {:?}",
                    a.shape
                ),
            });
        }
        let (rows, cols) = (a.shape[0], a.shape[1]);
        let mut values = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            values.extend_from_slice(&a.values[i * cols + start..i * cols + end]);
        }
        let v = Tensor {
            shape: vec![rows, end - start],
            values,
        };
        Ok(self.unary(v, Op::SliceCols(self.id, start, end)))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g>> {
        let v = self.graph.value(self.id).reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// max over parameters of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central-difference check of an analytic gradient.
///
/// `f` returns the objective and its analytic gradient at the given
/// parameters; the probes only use the objective value.
pub fn finite_difference_check<F>(f: F, params: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::BadStep(h));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFiniteProbe { probe: 0, index: 0 });
    }
    if analytic.len() != params.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "finite_difference_check",
            lhs: vec![analytic.len()],
            rhs: vec![params.len()],
        });
    }
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let plus = f(&probe)?.0;
        if !plus.is_finite() {
            return Err(AutodiffError::NonFiniteProbe {
                probe: 2 * i + 1,
                index: i,
            });
        }
        probe[i] = params[i] - h;
        let minus = f(&probe)?.0;
        if !minus.is_finite() {
            return Err(AutodiffError::NonFiniteProbe {
                probe: 2 * i + 2,
                index: i,
            });
        }
        probe[i] = params[i];
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

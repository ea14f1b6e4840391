//! Minimal dense-tensor engine with a reverse-mode differentiation tape.
//!
//! Everything is 64-bit and row-major. A [`Tape`] owns an append-only list
//! of nodes; a [`Var`] is a copyable handle into one tape. There is no
//! implicit broadcasting: elementwise ops require identical shapes, and
//! scalars (rank-0 tensors) enter only through the explicit [`Var::scale`]
//! and [`Var::add_scalar`] ops so learnable step sizes and gains can sit on
//! the same tape as the weight matrices.
//!
//! Graph operators appear in two forms: [`Tape::sparse_apply`] multiplies by
//! a frozen sparse matrix, while [`Tape::edge_diff`] applies the upwind
//! difference stencil with *differentiable* per-edge weights, which is how
//! gradients reach the edge-feature networks that produce dx and dz.

mod adam;
mod checkpoint;

pub use adam::AdamState;
pub use checkpoint::{read_blob, write_blob};

use std::cell::RefCell;
use std::sync::Arc;

use crate::diffops::{DiffStructure, DifferenceOperator};
use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
        }
    }
}

/// Frozen sparse matrix used for constant-coefficient products.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn from_operator(op: &DifferenceOperator) -> Self {
        Self {
            rows: op.dim(),
            cols: op.dim(),
            entries: op.entries().to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Recip(usize),
    Matmul(usize, usize),
    Scale { scalar: usize, tensor: usize },
    AddScalar { tensor: usize, scalar: usize },
    ScaleConst { input: usize, factor: f64 },
    AddConst { input: usize },
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    SparseMul { matrix: Arc<SparseMatrix>, input: usize },
    EdgeDiff { structure: Arc<DiffStructure>, weights: usize, input: usize },
    Mse { pred: usize, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
///
/// Inputs always precede outputs, so a single reverse sweep over the node
/// list visits every node after all of its consumers.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor. Only `trainable` leaves receive gradients.
    pub fn leaf(&self, value: Tensor, trainable: bool) -> Var<'_> {
        self.push(value, Op::Leaf, trainable)
    }

    /// Shorthand for a non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn record(&self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var<'_>> {
        #[cfg(debug_assertions)]
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite value produced on tape".into()));
        }
        Ok(self.push(value, op, needs_grad))
    }

    /// Multiply a node matrix `[n, d]` by a frozen sparse matrix.
    pub fn sparse_apply<'t>(&'t self, matrix: &Arc<SparseMatrix>, x: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value_of(x.id);
        let (n, d) = xv.rows_cols()?;
        if matrix.cols != n {
            return Err(Error::Shape(format!(
                "sparse matrix has {} columns but input has {n} rows",
                matrix.cols
            )));
        }
        let mut out = vec![0.0; matrix.rows * d];
        for &(r, c, v) in &matrix.entries {
            let src = &xv.data()[c * d..(c + 1) * d];
            let dst = &mut out[r * d..(r + 1) * d];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += v * s;
            }
        }
        self.record(
            Tensor::new(vec![matrix.rows, d], out)?,
            Op::SparseMul {
                matrix: Arc::clone(matrix),
                input: x.id,
            },
            self.needs_grad(x.id),
        )
    }

    /// Convenience wrapper applying a frozen [`DifferenceOperator`].
    pub fn apply_operator<'t>(&'t self, op: &DifferenceOperator, x: Var<'t>) -> Result<Var<'t>> {
        self.sparse_apply(&Arc::new(SparseMatrix::from_operator(op)), x)
    }

    /// Upwind difference with differentiable per-edge weights:
    /// `out[i, :] = inv_k_i * sum_e w[e] * (x[i, :] - x[nbr_e, :])`.
    pub fn edge_diff<'t>(
        &'t self,
        structure: &Arc<DiffStructure>,
        weights: Var<'t>,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let wv = self.value_of(weights.id);
        let xv = self.value_of(x.id);
        let (n, d) = xv.rows_cols()?;
        if n != structure.num_nodes() {
            return Err(Error::Shape(format!(
                "operator over {} nodes applied to {n}-row matrix",
                structure.num_nodes()
            )));
        }
        if wv.numel() != structure.num_edges() {
            return Err(Error::Shape(format!(
                "{} weights for {} edges",
                wv.numel(),
                structure.num_edges()
            )));
        }
        let w = wv.data();
        let xd = xv.data();
        let mut out = vec![0.0; n * d];
        for (i, row) in structure.rows().iter().enumerate() {
            for &(j, e) in &row.entries {
                let coeff = row.inv_count * w[e];
                for k in 0..d {
                    out[i * d + k] += coeff * (xd[i * d + k] - xd[j * d + k]);
                }
            }
        }
        self.record(
            Tensor::new(vec![n, d], out)?,
            Op::EdgeDiff {
                structure: Arc::clone(structure),
                weights: weights.id,
                input: x.id,
            },
            self.needs_grad(weights.id) || self.needs_grad(x.id),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse<'t>(&'t self, pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
        let p = self.value_of(pred.id);
        let t = self.value_of(target.id);
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "mse over {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let n = p.numel() as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.record(
            Tensor::scalar(sum / n),
            Op::Mse {
                pred: pred.id,
                target: target.id,
            },
            self.needs_grad(pred.id) || self.needs_grad(target.id),
        )
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// trainable leaves that did not participate read back as zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss lives on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar loss of shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adjoints[loss.id] = Some(Tensor::new(
            nodes[loss.id].value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(grad) = adjoints[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    adjoints[id] = Some(grad);
                }
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut adjoints, *a, grad.data(), 1.0);
                    accumulate(&nodes, &mut adjoints, *b, grad.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut adjoints, *a, grad.data(), 1.0);
                    accumulate(&nodes, &mut adjoints, *b, grad.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let ga: Vec<f64> = grad.data().iter().zip(bv).map(|(g, v)| g * v).collect();
                    let gb: Vec<f64> = grad.data().iter().zip(av).map(|(g, v)| g * v).collect();
                    accumulate(&nodes, &mut adjoints, *a, &ga, 1.0);
                    accumulate(&nodes, &mut adjoints, *b, &gb, 1.0);
                }
                Op::Recip(a) => {
                    let av = nodes[*a].value.data();
                    let ga: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(av)
                        .map(|(g, v)| -g / (v * v))
                        .collect();
                    accumulate(&nodes, &mut adjoints, *a, &ga, 1.0);
                }
                Op::Matmul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = av.rows_cols().expect("matmul input is a matrix");
                    let (_, n) = bv.rows_cols().expect("matmul input is a matrix");
                    // dA = G * B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad.data()[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += g * bv.data()[p * n + j];
                            }
                        }
                    }
                    // dB = A^T * G
                    let mut gb = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let a_ip = av.data()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += a_ip * grad.data()[i * n + j];
                            }
                        }
                    }
                    accumulate(&nodes, &mut adjoints, *a, &ga, 1.0);
                    accumulate(&nodes, &mut adjoints, *b, &gb, 1.0);
                }
                Op::Scale { scalar, tensor } => {
                    let s = nodes[*scalar].value.data()[0];
                    let tv = nodes[*tensor].value.data();
                    let gs: f64 = grad.data().iter().zip(tv).map(|(g, v)| g * v).sum();
                    accumulate(&nodes, &mut adjoints, *scalar, &[gs], 1.0);
                    let gt: Vec<f64> = grad.data().iter().map(|g| g * s).collect();
                    accumulate(&nodes, &mut adjoints, *tensor, &gt, 1.0);
                }
                Op::AddScalar { tensor, scalar } => {
                    accumulate(&nodes, &mut adjoints, *tensor, grad.data(), 1.0);
                    let gs: f64 = grad.data().iter().sum();
                    accumulate(&nodes, &mut adjoints, *scalar, &[gs], 1.0);
                }
                Op::ScaleConst { input, factor } => {
                    accumulate(&nodes, &mut adjoints, *input, grad.data(), *factor);
                }
                Op::AddConst { input } => {
                    accumulate(&nodes, &mut adjoints, *input, grad.data(), 1.0);
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    let ga: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(yv)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&nodes, &mut adjoints, *a, &ga, 1.0);
                }
                Op::Softplus(a) => {
                    let av = nodes[*a].value.data();
                    let ga: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(av)
                        .map(|(g, x)| g / (1.0 + (-x).exp()))
                        .collect();
                    accumulate(&nodes, &mut adjoints, *a, &ga, 1.0);
                }
                Op::Relu(a) => {
                    let av = nodes[*a].value.data();
                    let ga: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(av)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&nodes, &mut adjoints, *a, &ga, 1.0);
                }
                Op::SparseMul { matrix, input } => {
                    let d = node.value.shape()[1];
                    let n_in = nodes[*input].value.shape()[0];
                    let mut gx = vec![0.0; n_in * d];
                    for &(r, c, v) in &matrix.entries {
                        let src = &grad.data()[r * d..(r + 1) * d];
                        let dst = &mut gx[c * d..(c + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += v * s;
                        }
                    }
                    accumulate(&nodes, &mut adjoints, *input, &gx, 1.0);
                }
                Op::EdgeDiff {
                    structure,
                    weights,
                    input,
                } => {
                    let d = node.value.shape()[1];
                    let xd = nodes[*input].value.data();
                    let wd = nodes[*weights].value.data();
                    let n = structure.num_nodes();
                    let mut gx = vec![0.0; n * d];
                    let mut gw = vec![0.0; structure.num_edges()];
                    for (i, row) in structure.rows().iter().enumerate() {
                        let grow = &grad.data()[i * d..(i + 1) * d];
                        for &(j, e) in &row.entries {
                            let coeff = row.inv_count * wd[e];
                            let mut dot = 0.0;
                            for k in 0..d {
                                gx[i * d + k] += coeff * grow[k];
                                gx[j * d + k] -= coeff * grow[k];
                                dot += grow[k] * (xd[i * d + k] - xd[j * d + k]);
                            }
                            gw[e] += row.inv_count * dot;
                        }
                    }
                    accumulate(&nodes, &mut adjoints, *input, &gx, 1.0);
                    accumulate(&nodes, &mut adjoints, *weights, &gw, 1.0);
                }
                Op::Mse { pred, target } => {
                    let pv = nodes[*pred].value.data();
                    let tv = nodes[*target].value.data();
                    let n = pv.len() as f64;
                    let g = grad.data()[0];
                    let gp: Vec<f64> = pv
                        .iter()
                        .zip(tv)
                        .map(|(p, t)| g * 2.0 * (p - t) / n)
                        .collect();
                    accumulate(&nodes, &mut adjoints, *pred, &gp, 1.0);
                    accumulate(&nodes, &mut adjoints, *target, &gp, -1.0);
                }
            }
        }

        // leaves that never fed the loss still report zeros
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && adjoints[id].is_none() {
                adjoints[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: adjoints })
    }
}

fn accumulate(
    nodes: &[Node],
    adjoints: &mut [Option<Tensor>],
    id: usize,
    contribution: &[f64],
    factor: f64,
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut adjoints[id];
    match slot {
        Some(t) => {
            for (dst, src) in t.data_mut().iter_mut().zip(contribution) {
                *dst += factor * src;
            }
        }
        None => {
            let mut t = Tensor::zeros(nodes[id].value.shape().to_vec());
            for (dst, src) in t.data_mut().iter_mut().zip(contribution) {
                *dst = factor * src;
            }
            *slot = Some(t);
        }
    }
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// participate or does not require gradients.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(v.tape.shape_of(v.id)),
        }
    }
}

/// Handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Copy of this node's value as a fresh non-trainable leaf: gradients do
    /// not flow through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_shape(self, rhs: Var<'t>, what: &str) -> Result<()> {
        let a = self.tape.shape_of(self.id);
        let b = rhs.tape.shape_of(rhs.id);
        if !std::ptr::eq(self.tape, rhs.tape) {
            return Err(Error::Contract(format!("{what} across different tapes")));
        }
        if a != b {
            return Err(Error::Shape(format!("{what} over {a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(rhs, "add")?;
        let a = self.value();
        let b = rhs.value();
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Add(self.id, rhs.id),
            self.tape.needs_grad(self.id) || self.tape.needs_grad(rhs.id),
        )
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(rhs, "sub")?;
        let a = self.value();
        let b = rhs.value();
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Sub(self.id, rhs.id),
            self.tape.needs_grad(self.id) || self.tape.needs_grad(rhs.id),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(rhs, "mul")?;
        let a = self.value();
        let b = rhs.value();
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Mul(self.id, rhs.id),
            self.tape.needs_grad(self.id) || self.tape.needs_grad(rhs.id),
        )
    }

    /// Elementwise reciprocal.
    pub fn recip(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| 1.0 / x).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Recip(self.id),
            self.tape.needs_grad(self.id),
        )
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        if !std::ptr::eq(self.tape, rhs.tape) {
            return Err(Error::Contract("matmul across different tapes".into()));
        }
        let a = self.value();
        let b = rhs.value();
        let (m, k) = a.rows_cols()?;
        let (k2, n) = b.rows_cols()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul [{m}x{k}] * [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = a.data()[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a_ip * b.data()[p * n + j];
                }
            }
        }
        self.tape.record(
            Tensor::new(vec![m, n], out)?,
            Op::Matmul(self.id, rhs.id),
            self.tape.needs_grad(self.id) || self.tape.needs_grad(rhs.id),
        )
    }

    /// Multiply by a rank-0 tensor on the same tape.
    pub fn scale(self, scalar: Var<'t>) -> Result<Var<'t>> {
        let s = scalar.value();
        if !s.is_scalar() {
            return Err(Error::Shape(format!(
                "scale by tensor of shape {:?}",
                s.shape()
            )));
        }
        let a = self.value();
        let sv = s.data()[0];
        let data = a.data().iter().map(|x| sv * x).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Scale {
                scalar: scalar.id,
                tensor: self.id,
            },
            self.tape.needs_grad(self.id) || self.tape.needs_grad(scalar.id),
        )
    }

    /// Add a rank-0 tensor to every element.
    pub fn add_scalar(self, scalar: Var<'t>) -> Result<Var<'t>> {
        let s = scalar.value();
        if !s.is_scalar() {
            return Err(Error::Shape(format!(
                "add_scalar with tensor of shape {:?}",
                s.shape()
            )));
        }
        let a = self.value();
        let sv = s.data()[0];
        let data = a.data().iter().map(|x| x + sv).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddScalar {
                tensor: self.id,
                scalar: scalar.id,
            },
            self.tape.needs_grad(self.id) || self.tape.needs_grad(scalar.id),
        )
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale_const(self, factor: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| factor * x).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::ScaleConst {
                input: self.id,
                factor,
            },
            self.tape.needs_grad(self.id),
        )
    }

    /// Add a constant to every element.
    pub fn add_const(self, offset: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + offset).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddConst { input: self.id },
            self.tape.needs_grad(self.id),
        )
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.tanh()).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Tanh(self.id),
            self.tape.needs_grad(self.id),
        )
    }

    /// `ln(1 + e^x)`, switching to the identity above 30 to avoid overflow.
    pub fn softplus(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&x| if x > 30.0 { x } else { x.exp().ln_1p() })
            .collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Softplus(self.id),
            self.tape.needs_grad(self.id),
        )
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(self) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        self.tape.record(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Relu(self.id),
            self.tape.needs_grad(self.id),
        )
    }
}

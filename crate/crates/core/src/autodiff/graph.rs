//! Recording tape and reverse-mode sweep.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. [`Var`]s are
//! cheap copyable handles into it. Calling [`Graph::backward`] walks the tape
//! in reverse insertion order, which is a valid topological order because a
//! node can only reference nodes recorded before it.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use super::TensorError;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    Elu(usize),
    Softplus(usize, f64),
    Ln(usize),
    Exp(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward recording. Backward may be run at most once.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

/// Per-feature batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention used for running estimates.
    pub var_unbiased: Vec<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or anything we want a gradient for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that carries no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        assert!(
            std::ptr::eq(loss.graph, self),
            "loss belongs to a different graph"
        );
        if self.consumed.replace(true) {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::new(seed_shape, vec![1.0]).expect("scalar seed"));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &grad, &mut grads);
            }
            grads[id] = Some(grad);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`; exactly zero when `var` did not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => {
                let shape = self.shapes[var.id].clone();
                let n = shape.iter().product();
                Tensor::new(shape, vec![0.0; n]).expect("shape product")
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, contribution: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate(nodes: &[Node], id: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    let req = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    let g = grad.data();

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if req(*a) {
                let mut da = vec![0.0; m * k];
                gemm(g, m, n, false, val(*b).data(), k, n, true, &mut da, false);
                accumulate(grads, *a, Tensor::from_rows(m, k, da));
            }
            if req(*b) {
                let mut db = vec![0.0; k * n];
                gemm(val(*a).data(), m, k, true, g, m, n, false, &mut db, false);
                accumulate(grads, *b, Tensor::from_rows(k, n, db));
            }
        }
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if req(*p) {
                    accumulate(grads, *p, grad.clone());
                }
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                accumulate(grads, *a, grad.clone());
            }
            if req(*b) {
                accumulate(grads, *b, grad.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                let d = zip_map(g, val(*b).data(), |g, y| g * y);
                accumulate(grads, *a, like(val(*a), d));
            }
            if req(*b) {
                let d = zip_map(g, val(*a).data(), |g, x| g * x);
                accumulate(grads, *b, like(val(*b), d));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b).data();
            if req(*a) {
                let d = zip_map(g, bv, |g, y| g / y);
                accumulate(grads, *a, like(val(*a), d));
            }
            if req(*b) {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .zip(bv)
                    .map(|((g, q), y)| -g * q / y)
                    .collect();
                accumulate(grads, *b, like(val(*b), d));
            }
        }
        Op::AddRow(a, b) => {
            if req(*a) {
                accumulate(grads, *a, grad.clone());
            }
            if req(*b) {
                accumulate(grads, *b, column_sums(grad));
            }
        }
        Op::MulRow(a, b) => {
            let cols = out.cols();
            let brow = val(*b).data();
            if req(*a) {
                let d: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * brow[i % cols])
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            if req(*b) {
                let mut d = vec![0.0; cols];
                for (i, (g, x)) in g.iter().zip(val(*a).data()).enumerate() {
                    d[i % cols] += g * x;
                }
                accumulate(grads, *b, Tensor::from_rows(1, cols, d));
            }
        }
        Op::MulCol(a, b) => {
            let cols = out.cols();
            let bcol = val(*b).data();
            if req(*a) {
                let d: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * bcol[i / cols])
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
            if req(*b) {
                let mut d = vec![0.0; bcol.len()];
                for (i, (g, x)) in g.iter().zip(val(*a).data()).enumerate() {
                    d[i / cols] += g * x;
                }
                accumulate(grads, *b, like(val(*b), d));
            }
        }
        Op::Scale(a, c) => {
            if req(*a) {
                accumulate(grads, *a, grad.map(|x| x * c));
            }
        }
        Op::AddScalar(a) => {
            if req(*a) {
                accumulate(grads, *a, grad.clone());
            }
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = val(p).cols();
                if req(p) {
                    let mut d = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                    }
                    accumulate(grads, p, Tensor::from_rows(rows, pc, d));
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if req(p) {
                    accumulate(grads, p, like(val(p), g[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::SliceCols(a, start) => {
            if req(*a) {
                let (rows, cols) = (val(*a).rows(), val(*a).cols());
                let width = out.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(grads, *a, Tensor::from_rows(rows, cols, d));
            }
        }
        Op::GatherRows(a, index) => {
            if req(*a) {
                let (rows, cols) = (val(*a).rows(), val(*a).cols());
                let mut d = vec![0.0; rows * cols];
                for (out_row, &src) in index.iter().enumerate() {
                    let dst = &mut d[src * cols..(src + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(&g[out_row * cols..(out_row + 1) * cols]) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, Tensor::from_rows(rows, cols, d));
            }
        }
        Op::ScatterAddRows(a, index) => {
            if req(*a) {
                let cols = out.cols();
                let mut d = Vec::with_capacity(index.len() * cols);
                for &dst in index.iter() {
                    d.extend_from_slice(&g[dst * cols..(dst + 1) * cols]);
                }
                accumulate(grads, *a, Tensor::from_rows(index.len(), cols, d));
            }
        }
        Op::Elu(a) => {
            if req(*a) {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .zip(out.data())
                    .map(|((g, x), y)| if *x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::Softplus(a, beta) => {
            if req(*a) {
                let d = zip_map(g, val(*a).data(), |g, x| g * sigmoid(beta * x));
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::Ln(a) => {
            if req(*a) {
                let d = zip_map(g, val(*a).data(), |g, x| g / x);
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::Exp(a) => {
            if req(*a) {
                let d = zip_map(g, out.data(), |g, y| g * y);
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::Square(a) => {
            if req(*a) {
                let d = zip_map(g, val(*a).data(), |g, x| 2.0 * g * x);
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::Softmax(a) => {
            if req(*a) {
                let cols = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((dx, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dx = y * (g - dot);
                    }
                }
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::LogSoftmax(a) => {
            if req(*a) {
                let cols = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: f64 = gr.iter().sum();
                    for ((dx, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dx = g - y.exp() * total;
                    }
                }
                accumulate(grads, *a, like(val(*a), d));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (rows, cols) = (out.rows(), out.cols());
            let gam = val(*gamma).data();
            let xh = xhat.data();
            let mut sum_dy = vec![0.0; cols];
            let mut sum_dy_xhat = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    sum_dy[c] += g[i];
                    sum_dy_xhat[c] += g[i] * xh[i];
                }
            }
            if req(*gamma) {
                accumulate(
                    grads,
                    *gamma,
                    Tensor::from_rows(1, cols, sum_dy_xhat.clone()),
                );
            }
            if req(*beta) {
                accumulate(grads, *beta, Tensor::from_rows(1, cols, sum_dy.clone()));
            }
            if req(*input) {
                let m = rows as f64;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        d[i] = gam[c] * inv_std[c] / m
                            * (m * g[i] - sum_dy[c] - xh[i] * sum_dy_xhat[c]);
                    }
                }
                accumulate(grads, *input, Tensor::from_rows(rows, cols, d));
            }
        }
        Op::Sum(a) => {
            if req(*a) {
                let s = g[0];
                accumulate(grads, *a, val(*a).map(|_| s));
            }
        }
        Op::Mean(a) => {
            if req(*a) {
                let s = g[0] / val(*a).len() as f64;
                accumulate(grads, *a, val(*a).map(|_| s));
            }
        }
        Op::Reshape(a) => {
            if req(*a) {
                let d = like(val(*a), g.to_vec());
                accumulate(grads, *a, d);
            }
        }
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient matches parent shape")
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn column_sums(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut s = vec![0.0; cols];
    for row in t.data().chunks(cols) {
        for (acc, x) in s.iter_mut().zip(row) {
            *acc += x;
        }
    }
    Tensor::from_rows(1, cols, s)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(1/beta) ln(1 + exp(beta x))`, overflow-safe.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 30.0 {
        x + (-z).exp().ln_1p() / beta
    } else {
        z.exp().ln_1p() / beta
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Holding the returned guard while adding nodes panics; take
    /// [`Var::item`] or clone when the value has to outlive the expression.
    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    /// First element of the value, without keeping the graph borrowed.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let value = f(&self.value());
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn binary_same(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        self.same_graph(&other);
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(TensorError::shape(name, &[a.shape(), b.shape()]));
            }
            like(&a, zip_map(a.data(), b.data(), f))
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, op, rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary_same(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.same_graph(&other);
        let value = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a
                .dims2()
                .map_err(|_| TensorError::shape("matmul", &[a.shape(), b.shape()]))?;
            let (k2, n) = b
                .dims2()
                .map_err(|_| TensorError::shape("matmul", &[a.shape(), b.shape()]))?;
            if k != k2 {
                return Err(TensorError::shape("matmul", &[a.shape(), b.shape()]));
            }
            let mut c = vec![0.0; m * n];
            gemm(a.data(), m, k, false, b.data(), k, n, false, &mut c, false);
            Tensor::from_rows(m, n, c)
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id), rg))
    }

    fn row_broadcast(
        self,
        row: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        self.same_graph(&row);
        let value = {
            let a = self.value();
            let b = row.value();
            let ok = a.dims2().is_ok() && b.shape() == [1, a.cols()];
            if !ok {
                return Err(TensorError::shape(name, &[a.shape(), b.shape()]));
            }
            let cols = a.cols();
            let d = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, b.data()[i % cols]))
                .collect();
            like(&a, d)
        };
        let rg = self.graph.needs(&[self.id, row.id]);
        Ok(self.graph.push(value, op, rg))
    }

    /// `self[r, c] + row[0, c]`.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// `self[r, c] * row[0, c]`.
    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    /// `self[r, c] * col[r, 0]`.
    pub fn mul_col(self, col: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.same_graph(&col);
        let value = {
            let a = self.value();
            let b = col.value();
            if a.dims2().is_err() || b.shape() != [a.rows(), 1] {
                return Err(TensorError::shape("mul_col", &[a.shape(), b.shape()]));
            }
            let cols = a.cols();
            let d = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * b.data()[i / cols])
                .collect();
            like(&a, d)
        };
        let rg = self.graph.needs(&[self.id, col.id]);
        Ok(self.graph.push(value, Op::MulCol(self.id, col.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|x| x + c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn elu(self) -> Var<'g> {
        self.unary(Op::Elu(self.id), |t| t.map(elu))
    }

    /// `(1/beta) ln(1 + exp(beta x))`.
    pub fn softplus(self, beta: f64) -> Var<'g> {
        self.unary(Op::Softplus(self.id, beta), |t| {
            t.map(|x| softplus(x, beta))
        })
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Ln(self.id), |t| t.map(f64::ln))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square(self.id), |t| t.map(|x| x * x))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'g> {
        self.unary(Op::Softmax(self.id), |t| {
            let cols = t.cols();
            let mut d = t.data().to_vec();
            for row in d.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            like(t, d)
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'g> {
        self.unary(Op::LogSoftmax(self.id), |t| {
            let cols = t.cols();
            let mut d = t.data().to_vec();
            for row in d.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            like(t, d)
        })
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(pairwise_sum(t.data())))
    }

    pub fn mean(self) -> Var<'g> {
        self.unary(Op::Mean(self.id), |t| {
            Tensor::scalar(pairwise_sum(t.data()) / t.len() as f64)
        })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g>, TensorError> {
        let value = self.value().clone().reshaped(shape)?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(value, Op::Reshape(self.id), rg))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.value();
            if a.dims2().is_err() || start > end || end > a.cols() {
                return Err(TensorError::Slice {
                    start,
                    end,
                    shape: a.shape().to_vec(),
                });
            }
            let (rows, cols) = (a.rows(), a.cols());
            let mut d = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                d.extend_from_slice(&a.data()[r * cols + start..r * cols + end]);
            }
            Tensor::from_rows(rows, end - start, d)
        };
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(value, Op::SliceCols(self.id, start), rg))
    }

    /// `out[i, :] = self[index[i], :]`.
    pub fn gather_rows(self, index: &Rc<[usize]>) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return Err(TensorError::Index { index: bad, rows });
            }
            let mut d = Vec::with_capacity(index.len() * cols);
            for &i in index.iter() {
                d.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
            }
            Tensor::from_rows(index.len(), cols, d)
        };
        let rg = self.graph.needs(&[self.id]);
        Ok(self
            .graph
            .push(value, Op::GatherRows(self.id, Rc::clone(index)), rg))
    }

    /// `out[index[i], :] += self[i, :]` into `out_rows` zero rows.
    pub fn scatter_add_rows(
        self,
        index: &Rc<[usize]>,
        out_rows: usize,
    ) -> Result<Var<'g>, TensorError> {
        let value = {
            let a = self.value();
            let (rows, cols) = a.dims2()?;
            if rows != index.len() {
                return Err(TensorError::shape(
                    "scatter_add_rows",
                    &[a.shape(), &[index.len()]],
                ));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
                return Err(TensorError::Index {
                    index: bad,
                    rows: out_rows,
                });
            }
            let mut d = vec![0.0; out_rows * cols];
            for (src, &dst) in index.iter().enumerate() {
                let row = &a.data()[src * cols..(src + 1) * cols];
                for (x, y) in d[dst * cols..(dst + 1) * cols].iter_mut().zip(row) {
                    *x += y;
                }
            }
            Tensor::from_rows(out_rows, cols, d)
        };
        let rg = self.graph.needs(&[self.id]);
        Ok(self
            .graph
            .push(value, Op::ScatterAddRows(self.id, Rc::clone(index)), rg))
    }

    /// Training-mode batch normalisation over rows with affine `gamma`, `beta`.
    pub fn batch_norm(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> Result<(Var<'g>, BatchStats), TensorError> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let (value, xhat, inv_std, stats) = {
            let x = self.value();
            let (rows, cols) = x.dims2()?;
            let (gv, bv) = (gamma.value(), beta.value());
            if gv.shape() != [1, cols] || bv.shape() != [1, cols] || rows == 0 {
                return Err(TensorError::shape(
                    "batch_norm",
                    &[x.shape(), gv.shape(), bv.shape()],
                ));
            }
            let m = rows as f64;
            let mut mean = vec![0.0; cols];
            for row in x.data().chunks(cols) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            let mut var = vec![0.0; cols];
            for row in x.data().chunks(cols) {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            let ss = var.clone();
            var.iter_mut().for_each(|v| *v /= m);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xh = vec![0.0; rows * cols];
            let mut y = vec![0.0; rows * cols];
            for i in 0..rows * cols {
                let c = i % cols;
                xh[i] = (x.data()[i] - mean[c]) * inv_std[c];
                y[i] = xh[i] * gv.data()[c] + bv.data()[c];
            }
            let var_unbiased = if rows > 1 {
                ss.iter().map(|s| s / (m - 1.0)).collect()
            } else {
                var.clone()
            };
            (
                Tensor::from_rows(rows, cols, y),
                Tensor::from_rows(rows, cols, xh),
                inv_std,
                BatchStats { mean, var_unbiased },
            )
        };
        let rg = self.graph.needs(&[self.id, gamma.id, beta.id]);
        let out = self.graph.push(
            value,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, stats))
    }
}

/// Column-wise concatenation.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
    let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
    let graph = first.graph;
    let value = {
        let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        if values
            .iter()
            .any(|v| v.dims2().is_err() || v.rows() != rows)
        {
            let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
            return Err(TensorError::shape("concat_cols", &shapes));
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let c = v.cols();
                d.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        Tensor::from_rows(rows, total, d)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = graph.needs(&ids);
    Ok(graph.push(value, Op::ConcatCols(ids), rg))
}

/// Row-wise (vertical) concatenation.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
    let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
    let graph = first.graph;
    let value = {
        let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        if values
            .iter()
            .any(|v| v.dims2().is_err() || v.cols() != cols)
        {
            let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
            return Err(TensorError::shape("concat_rows", &shapes));
        }
        let rows: usize = values.iter().map(|v| v.rows()).sum();
        let mut d = Vec::with_capacity(rows * cols);
        for v in &values {
            d.extend_from_slice(v.data());
        }
        Tensor::from_rows(rows, cols, d)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = graph.needs(&ids);
    Ok(graph.push(value, Op::ConcatRows(ids), rg))
}

/// Pairwise (cascade) summation; error grows as O(log n) instead of O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

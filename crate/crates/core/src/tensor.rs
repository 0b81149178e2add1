//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter the graph
//! through [`Graph::leaf`], which copies their values; after
//! [`Graph::backward`] the gradient of each leaf is read back with
//! [`Graph::grad`] and folded into the owning [`Tensor`] with
//! [`Tensor::accumulate_grad`].
//!
//! Broadcasting is limited to a single-element operand against a tensor.
//! Row-wise patterns the networks need (bias addition, row normalisation,
//! pairwise distances) are dedicated ops with their own gradient rules.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `n x d` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(TensorError::InvalidShape {
                shape: vec![rows.len(), d],
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(&[rows.len(), d], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self.grad = None;
        self
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (or 1 for lower ranks).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(&[idx.len(), c], data)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer. No-op for frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
    Neg,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Second operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce {
        input: Var,
        kind: Reduction,
        axis: Option<usize>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    AddRow(Var, Var),
    NormalizeRows { input: Var, eps: f64 },
    PairwiseSqDist(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, so every node's
/// operands precede it.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Row-wise softmax of an `n x C` matrix, outside of any graph.
pub fn softmax_logits(z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let s = g.softmax_rows(v)?;
    Ok(g.tensor(s))
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a tensor, tracking gradients iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let value = transpose_raw(self.value(a), m, n);
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![n, m], value, Op::Transpose(a), rg))
    }

    /// Elementwise binary op. Either operand may be a single element, in
    /// which case it is broadcast over the other.
    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        let b = match b.into() {
            Operand::Var(v) => v,
            Operand::Scalar(s) => self.constant(Tensor::scalar(s)),
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        let shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: sa,
                right: sb,
            });
        };
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let mut value = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (pick(va, i), pick(vb, i));
            value.push(match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(TensorError::Domain {
                            op: "div",
                            detail: "division by zero".into(),
                        });
                    }
                    x / y
                }
            });
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value: Vec<f64> = match kind {
            UnaryOp::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            UnaryOp::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryOp::Neg => x.iter().map(|v| -v).collect(),
            UnaryOp::Log => {
                if let Some(bad) = x.iter().find(|v| !(**v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                x.iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Sqrt => {
                if let Some(bad) = x.iter().find(|v| !(**v >= 0.0)) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        detail: format!("negative argument {bad}"),
                    });
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad;
        Ok(self.push(shape, value, Op::Unary(kind, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    /// Sum or mean over one axis (dropping it), or over everything when
    /// `axis` is `None`.
    pub fn reduce(&mut self, a: Var, kind: Reduction, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let x = self.value(a);
        let (out_shape, value) = match axis {
            None => {
                let s: f64 = x.iter().sum();
                let v = match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / x.len() as f64,
                };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::InvalidAxis {
                        op: "reduce",
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let (outer, len, inner) = reduce_dims(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += x[base + i];
                        }
                    }
                }
                if kind == Reduction::Mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        let rg = self.node(a).requires_grad;
        Ok(self.push(out_shape, value, Op::Reduce { input: a, kind, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Sum, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Mean, None)
    }

    fn rows_op_input(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let dims = self.dims2(op, a)?;
        check_finite(op, self.value(a))?;
        Ok(dims)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.rows_op_input("softmax", a)?;
        let x = self.value(a);
        let mut value = vec![0.0; n * c];
        for i in 0..n {
            softmax_row(&x[i * c..(i + 1) * c], &mut value[i * c..(i + 1) * c]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![n, c], value, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise log-softmax (log-sum-exp form).
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.rows_op_input("log_softmax", a)?;
        let x = self.value(a);
        let mut value = vec![0.0; n * c];
        for i in 0..n {
            log_softmax_row(&x[i * c..(i + 1) * c], &mut value[i * c..(i + 1) * c]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![n, c], value, Op::LogSoftmaxRows(a), rg))
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims2("add_row", a)?;
        if numel(self.shape(row)) != m || self.shape(row).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![n, m],
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let value: Vec<f64> = self
            .value(a)
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, b)| x + b))
            .collect();
        let rg = self.node(a).requires_grad || self.node(row).requires_grad;
        Ok(self.push(vec![n, m], value, Op::AddRow(a, row), rg))
    }

    /// Divides each row by `max(norm, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.rows_op_input("normalize_rows", a)?;
        let x = self.value(a);
        let mut value = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for (o, v) in value[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / s;
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![n, d], value, Op::NormalizeRows { input: a, eps }, rg))
    }

    /// `out[i][j] = |x_i - x_j|^2` for the rows of an `n x d` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.rows_op_input("pairwise_sq_dist", a)?;
        let value = pairwise_sq_dist_raw(self.value(a), n, d);
        let rg = self.node(a).requires_grad;
        Ok(self.push(vec![n, n], value, Op::PairwiseSqDist(a), rg))
    }

    /// Reverse pass from a single-element `loss`. Leaf gradients sum over
    /// every path. A non-finite gradient anywhere aborts the pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &g)?;
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(cg),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::with_capacity(2);
                if self.node(*a).requires_grad {
                    let bt = transpose_raw(self.value(*b), k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if self.node(*b).requires_grad {
                    let at = transpose_raw(self.value(*a), m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                res
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                vec![(*a, transpose_raw(g, n, m))]
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let n = g.len();
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                let slot = |buf: &mut Vec<f64>, i: usize, x: f64| {
                    if buf.len() == 1 {
                        buf[0] += x
                    } else {
                        buf[i] += x
                    }
                };
                for i in 0..n {
                    let (x, y) = (pick(va, i), pick(vb, i));
                    let (da, db) = match kind {
                        BinaryOp::Add => (g[i], g[i]),
                        BinaryOp::Sub => (g[i], -g[i]),
                        BinaryOp::Mul => (g[i] * y, g[i] * x),
                        BinaryOp::Div => (g[i] / y, -g[i] * x / (y * y)),
                    };
                    slot(&mut ga, i, da);
                    slot(&mut gb, i, db);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let ga = match kind {
                    UnaryOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryOp::Neg => g.iter().map(|g| -g).collect(),
                    UnaryOp::Sqrt => g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect(),
                };
                vec![(*a, ga)]
            }
            Op::Reduce { input, kind, axis } => {
                let shape = self.shape(*input);
                let total = numel(shape);
                let ga = match axis {
                    None => {
                        let s = match kind {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / total as f64,
                        };
                        vec![s; total]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = reduce_dims(shape, *ax);
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / len as f64,
                        };
                        let mut ga = vec![0.0; total];
                        for o in 0..outer {
                            for k in 0..len {
                                let base = (o * len + k) * inner;
                                for i in 0..inner {
                                    ga[base + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        ga
                    }
                };
                vec![(*input, ga)]
            }
            Op::SoftmaxRows(a) => {
                let c = node.shape[1];
                let s = &node.value;
                let mut ga = vec![0.0; s.len()];
                for (r, (sr, gr)) in s.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for j in 0..c {
                        ga[r * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.shape[1];
                let ls = &node.value;
                let mut ga = vec![0.0; ls.len()];
                for (r, (lr, gr)) in ls.chunks(c).zip(g.chunks(c)).enumerate() {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[r * c + j] = gr[j] - lr[j].exp() * gsum;
                    }
                }
                vec![(*a, ga)]
            }
            Op::AddRow(a, row) => {
                let m = node.shape[1];
                let mut gr = vec![0.0; m];
                for chunk in g.chunks(m) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*a, g.to_vec()), (*row, gr)]
            }
            Op::NormalizeRows { input, eps } => {
                let d = node.shape[1];
                let x = self.value(*input);
                let mut ga = vec![0.0; x.len()];
                for (i, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
                    let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = r.max(*eps);
                    let dot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                    let coef = if r > *eps { dot / (r * r * r) } else { 0.0 };
                    for j in 0..d {
                        ga[i * d + j] = gr[j] / s - xr[j] * coef;
                    }
                }
                vec![(*input, ga)]
            }
            Op::PairwiseSqDist(a) => {
                let n = node.shape[0];
                let x = self.value(*a);
                let d = x.len() / n;
                let mut ga = vec![0.0; x.len()];
                for i in 0..n {
                    for j in 0..n {
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        if w == 0.0 || i == j {
                            continue;
                        }
                        for k in 0..d {
                            ga[i * d + k] += w * (x[i * d + k] - x[j * d + k]);
                        }
                    }
                }
                vec![(*a, ga)]
            }
        };
        for (_, g) in &out {
            check_finite("backward", g)?;
        }
        Ok(out)
    }
}

pub(crate) fn pairwise_sq_dist_raw(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn frozen_tensor_ignores_grad() {
        let mut t = Tensor::zeros(&[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());
        let mut p = t.with_grad();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2).unwrap());
        let b = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out), g.value(b));

        let a = g.constant(Tensor::new(&[1, 2], vec![1., 2.]).unwrap());
        let c = g.constant(Tensor::new(&[2, 1], vec![3., 4.]).unwrap());
        let out = g.matmul(a, c).unwrap();
        assert_eq!(g.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let err_a = grad_check(&a, |g, x| {
            let bv = g.constant(b.clone());
            let p = g.matmul(x, bv).unwrap();
            g.sum(p).unwrap()
        });
        let err_b = grad_check(&b, |g, x| {
            let av = g.constant(a.clone());
            let p = g.matmul(av, x).unwrap();
            g.sum(p).unwrap()
        });
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);

        let x = g.constant(Tensor::new(&[2], vec![0.5, 3.0]).unwrap());
        let l = g.log(x).unwrap();
        let e = g.exp(l).unwrap();
        for (a, b) in g.value(e).iter().zip([0.5, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
        let y = g.constant(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(g.add(x, y), Err(TensorError::ShapeMismatch { .. })));
        let one = g.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        assert!(matches!(g.div(one, x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let s = g.constant(Tensor::scalar(10.0));
        let a = g.sub(s, x).unwrap();
        assert_eq!(g.value(a), &[9.0, 8.0]);
        let b = g.mul(x, 3.0).unwrap();
        assert_eq!(g.value(b), &[3.0, 6.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x.clone().with_grad());
        let sq = g.mul(xv, xv).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
        let err = grad_check(&x, |g, x| {
            let sq = g.mul(x, x).unwrap();
            g.sum(sq).unwrap()
        });
        assert!(err < 1e-6);
    }

    #[test]
    fn every_unary_and_binary_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, 1.2, 0.7, 2.0, 0.9, 1.5]).unwrap();
        let y = Tensor::new(&[2, 3], vec![1.1, -0.4, 0.8, 0.6, 1.3, -0.9]).unwrap();
        for kind in [UnaryOp::Relu, UnaryOp::Exp, UnaryOp::Log, UnaryOp::Neg, UnaryOp::Sqrt] {
            let err = grad_check(&x, |g, v| {
                let u = g.unary(kind, v).unwrap();
                let w = g.constant(y.clone());
                let p = g.mul(u, w).unwrap();
                g.sum(p).unwrap()
            });
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
        for kind in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let err_l = grad_check(&x, |g, v| {
                let w = g.constant(y.clone());
                let p = g.binary(kind, w, v).unwrap();
                let q = g.mul(p, p).unwrap();
                g.sum(q).unwrap()
            });
            let err_s = grad_check(&Tensor::scalar(0.7), |g, s| {
                let w = g.constant(x.clone());
                let p = g.binary(kind, w, s).unwrap();
                let q = g.mul(p, p).unwrap();
                g.sum(q).unwrap()
            });
            assert!(err_l < 1e-4 && err_s < 1e-4, "{kind:?}: {err_l} {err_s}");
        }
    }

    #[test]
    fn reduce_values_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![2.0, 4.0, 6.0]).unwrap());
        let m = g.mean(x).unwrap();
        assert_eq!(g.scalar(m), 4.0);
        let ones = g.constant(Tensor::new(&[2, 2], vec![1.0; 4]).unwrap());
        let s = g.reduce(ones, Reduction::Sum, Some(0)).unwrap();
        assert_eq!(g.shape(s), &[2]);
        assert_eq!(g.value(s), &[2.0, 2.0]);
        assert!(matches!(
            g.reduce(ones, Reduction::Sum, Some(2)),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn reduce_gradients() {
        let x = random(&[5], 3);
        let mut g = Graph::new();
        let xv = g.leaf(&x.clone().with_grad());
        let m = g.mean(xv).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(xv).unwrap().iter().all(|v| (v - 0.2).abs() < 1e-15));
        let err = grad_check(&x, |g, v| g.mean(v).unwrap());
        assert!(err < 1e-6);

        let w = random(&[2, 3, 4], 4);
        for axis in 0..3 {
            for kind in [Reduction::Sum, Reduction::Mean] {
                let err = grad_check(&w, |g, v| {
                    let r = g.reduce(v, kind, Some(axis)).unwrap();
                    let r2 = g.mul(r, r).unwrap();
                    g.sum(r2).unwrap()
                });
                assert!(err < 1e-4, "axis {axis} {kind:?}: {err}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_logits(&Tensor::new(&[1, 3], vec![0.0; 3]).unwrap()).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax_logits(&Tensor::new(&[1, 2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_logits(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        // 1 / (1 + e)
        assert!((s.data()[0] - 0.268_941_421_369_995).abs() < 1e-5);
        assert!((s.data()[1] - 0.731_058_578_630_005).abs() < 1e-5);
        let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_logits(&bad), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = random(&[6, 5], 9);
        let s = softmax_logits(&z).unwrap();
        for r in 0..6 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_op_gradients() {
        let x = random(&[4, 3], 5);
        let w = random(&[4, 3], 6);
        let weighted = |g: &mut Graph, v: Var| {
            let wv = g.constant(w.clone());
            let p = g.mul(v, wv).unwrap();
            g.sum(p).unwrap()
        };
        let checks: [(&str, f64); 4] = [
            (
                "softmax",
                grad_check(&x, |g, v| {
                    let s = g.softmax_rows(v).unwrap();
                    weighted(g, s)
                }),
            ),
            (
                "log_softmax",
                grad_check(&x, |g, v| {
                    let s = g.log_softmax_rows(v).unwrap();
                    weighted(g, s)
                }),
            ),
            (
                "normalize",
                grad_check(&x, |g, v| {
                    let s = g.normalize_rows(v, 1e-12).unwrap();
                    weighted(g, s)
                }),
            ),
            (
                "transpose",
                grad_check(&x, |g, v| {
                    let t = g.transpose(v).unwrap();
                    let t2 = g.transpose(t).unwrap();
                    weighted(g, t2)
                }),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: {err}");
        }
        let wn = random(&[4, 4], 7);
        let err = grad_check(&x, |g, v| {
            let d = g.pairwise_sq_dist(v).unwrap();
            let wv = g.constant(wn.clone());
            let p = g.mul(d, wv).unwrap();
            g.sum(p).unwrap()
        });
        assert!(err < 1e-4, "pairwise: {err}");
        let b = random(&[3], 8);
        let err = grad_check(&b, |g, bias| {
            let xv = g.constant(x.clone());
            let s = g.add_row(xv, bias).unwrap();
            weighted(g, s)
        });
        assert!(err < 1e-4, "add_row: {err}");
    }

    #[test]
    fn backward_constant_loss_gives_zero_grad() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let zero = g.mul(xv, 0.0).unwrap();
        let s = g.sum(zero).unwrap();
        let c = g.add(s, 5.0).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_linear_gives_column_sums() {
        let w = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let x = Tensor::new(&[3, 1], vec![0.1, 0.2, 0.3]).unwrap().with_grad();
        let mut g = Graph::new();
        let wv = g.constant(w);
        let xv = g.leaf(&x);
        let y = g.matmul(wv, xv).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_nan_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(&[1], vec![0.0]).unwrap().with_grad());
        let s = g.sqrt(x).unwrap();
        let l = g.sum(s).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shared_use_sums_path_gradients() {
        // f(x) = sum(x*w1) + sum(x*w2) vs the refactoring sum(x*(w1+w2)).
        let x = random(&[4], 10);
        let w1 = random(&[4], 11);
        let w2 = random(&[4], 12);
        let mut g = Graph::new();
        let xv = g.leaf(&x.clone().with_grad());
        let a = g.constant(w1.clone());
        let b = g.constant(w2.clone());
        let p = g.mul(xv, a).unwrap();
        let q = g.mul(xv, b).unwrap();
        let sp = g.sum(p).unwrap();
        let sq = g.sum(q).unwrap();
        let l = g.add(sp, sq).unwrap();
        g.backward(l).unwrap();
        let twice = g.grad(xv).unwrap().to_vec();

        let mut h = Graph::new();
        let xv = h.leaf(&x.with_grad());
        let w: Vec<f64> = w1.data().iter().zip(w2.data()).map(|(a, b)| a + b).collect();
        let wv = h.constant(Tensor::new(&[4], w).unwrap());
        let p = h.mul(xv, wv).unwrap();
        let l = h.sum(p).unwrap();
        h.backward(l).unwrap();
        for (a, b) in twice.iter().zip(h.grad(xv).unwrap()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mlp_cross_entropy_gradient_on_every_parameter() {
        let x = random(&[5, 3], 20);
        let labels = [0usize, 2, 1, 1, 0];
        let mut onehot = vec![0.0; 15];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * 3 + l] = 1.0;
        }
        let onehot = Tensor::new(&[5, 3], onehot).unwrap();
        let params = [random(&[3, 4], 21), random(&[4], 22), random(&[4, 3], 23), random(&[3], 24)];
        let loss = |g: &mut Graph, p: &[Var]| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, p[0]).unwrap();
            let h = g.add_row(h, p[1]).unwrap();
            let h = g.relu(h).unwrap();
            let o = g.matmul(h, p[2]).unwrap();
            let o = g.add_row(o, p[3]).unwrap();
            let ls = g.log_softmax_rows(o).unwrap();
            let oh = g.constant(onehot.clone());
            let picked = g.mul(ls, oh).unwrap();
            let s = g.mean(picked).unwrap();
            g.neg(s).unwrap()
        };
        for target in 0..params.len() {
            let err = grad_check(&params[target], |g, v| {
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == target { v } else { g.constant(t.clone()) })
                    .collect();
                loss(g, &vars)
            });
            assert!(err < 1e-4, "param {target}: {err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(random(&[7, 5], 30));
            let b = g.constant(random(&[5, 3], 31));
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(m).unwrap();
            g.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

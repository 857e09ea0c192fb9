//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order; a [`Var`] is an
//! index into it. Manifold layers plug in through [`CustomOp`], which receives
//! the recorded input values and the upstream adjoint and returns one
//! optional gradient per input.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule for a node whose forward value was computed
/// outside the tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(
        &self,
        inputs: &[&DMatrix<f64>],
        output: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<Vec<Option<DMatrix<f64>>>>;
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddIdentity(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Linear(Var, Var, Option<Var>),
    Conv2d(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CenterRows(Var),
    Gram(Var),
    Pick(Var, Vec<(usize, usize)>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddIdentity(..) => "add_identity",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Linear(..) => "linear",
            Op::Conv2d(..) => "conv2d",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::CenterRows(..) => "center_rows",
            Op::Gram(..) => "gram",
            Op::Pick(..) => "pick",
            Op::GatherRows(..) => "gather_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Reshape(..) => "reshape",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: DMatrix<f64>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoints produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the seed.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DMatrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> DMatrix<f64> {
        let (r, c) = self.shapes[v.0];
        self.adjoints[v.0].take().unwrap_or_else(|| DMatrix::zeros(r, c))
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> crate::error::Error {
    invalid(format!("{op}: incompatible shapes {}x{} and {}x{}", a.0, a.1, b.0, b.1))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_of(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn row_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.ncols().max(1) as f64;
    x.row_iter().map(|r| r.sum() / n).collect()
}

/// Valid cross-correlation of a single-channel image with a kernel.
pub fn conv2d_valid(input: &DMatrix<f64>, kernel: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (h, w) = input.shape();
    let (kh, kw) = kernel.shape();
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(shape_err("conv2d", input.shape(), kernel.shape()));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = DMatrix::zeros(oh, ow);
    for b in 0..kw {
        for a in 0..kh {
            let k = kernel[(a, b)];
            if k == 0.0 {
                continue;
            }
            for j in 0..ow {
                for i in 0..oh {
                    out[(i, j)] += k * input[(i + a, j + b)];
                }
            }
        }
    }
    Ok(out)
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

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(Op::Leaf, value, &[])
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(Op::Constant, value, &[])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).component_mul(self.value(b));
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(Op::Scale(a, s), v, &[a])
    }

    /// `a + eps·I` for square `a`.
    pub fn add_identity(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(invalid(format!("add_identity: {r}x{c} is not square")));
        }
        let mut v = self.value(a).clone();
        for i in 0..r {
            v[(i, i)] += eps;
        }
        Ok(self.push(Op::AddIdentity(a), v, &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) * self.value(b).transpose();
        Ok(self.push(Op::MatMulNT(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, &[a])
    }

    /// `x·w + 1·b` with `x: n×i`, `w: i×o`, `b: 1×o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if self.shape(x).1 != self.shape(w).0 {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut v = self.value(x) * self.value(w);
        if let Some(b) = b {
            if self.shape(b) != (1, v.ncols()) {
                return Err(shape_err("linear bias", self.shape(b), (1, v.ncols())));
            }
            let bias = self.value(b);
            for mut row in v.row_iter_mut() {
                row += bias;
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Op::Linear(x, w, b), v, &inputs))
    }

    /// Valid single-channel cross-correlation.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let v = conv2d_valid(self.value(input), self.value(kernel))?;
        Ok(self.push(Op::Conv2d(input, kernel), v, &[input, kernel]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, &[a])
    }

    /// Elementwise natural log; entries must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| !(x > 0.0)) {
            return Err(invalid("log: non-positive entry"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), v, &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows: no inputs"))?;
        let cols = self.shape(first).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", self.shape(first), self.shape(bad)));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            v.view_mut((at, 0), m.shape()).copy_from(m);
            at += m.nrows();
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols: no inputs"))?;
        let rows = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", self.shape(first), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            v.view_mut((0, at), m.shape()).copy_from(m);
            at += m.ncols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r || len == 0 {
            return Err(invalid(format!("slice_rows: [{start}, {}) out of {r} rows", start + len)));
        }
        let v = self.value(a).view((start, 0), (len, c)).clone_owned();
        Ok(self.push(Op::SliceRows(a, start), v, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(invalid(format!("slice_cols: [{start}, {}) out of {c} columns", start + len)));
        }
        let v = self.value(a).view((0, start), (r, len)).clone_owned();
        Ok(self.push(Op::SliceCols(a, start), v, &[a]))
    }

    /// Sum of all entries, as a 1×1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v, &[a])
    }

    /// Mean of all entries, as a 1×1 value.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).mean());
        self.push(Op::Mean(a), v, &[a])
    }

    /// Column-wise mean over rows: `n×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.nrows() as f64;
        let v = DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum() / n);
        self.push(Op::MeanRows(a), v, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_of(self.value(a));
        self.push(Op::SoftmaxRows(a), v, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            let max = row.max();
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.add_scalar_mut(-lse);
        }
        self.push(Op::LogSoftmaxRows(a), v, &[a])
    }

    /// Subtracts each row's mean from that row.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let means = row_means(&v);
        for (mut row, m) in v.row_iter_mut().zip(means) {
            row.add_scalar_mut(-m);
        }
        self.push(Op::CenterRows(a), v, &[a])
    }

    /// `a · aᵀ`.
    pub fn gram(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m * m.transpose();
        self.push(Op::Gram(a), v, &[a])
    }

    /// Selected entries stacked into a `k×1` column.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&(i, j)) = entries.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(invalid(format!("pick: ({i}, {j}) out of {r}x{c}")));
        }
        if entries.is_empty() {
            return Err(invalid("pick: no entries"));
        }
        let m = self.value(a);
        let v = DMatrix::from_iterator(entries.len(), 1, entries.iter().map(|&e| m[e]));
        Ok(self.push(Op::Pick(a, entries.to_vec()), v, &[a]))
    }

    /// Rows of `a` at `rows`, in order, with repetition allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("gather_rows: row {bad} out of {r}")));
        }
        if rows.is_empty() {
            return Err(invalid("gather_rows: no rows"));
        }
        let m = self.value(a);
        let v = DMatrix::from_fn(rows.len(), c, |i, j| m[(rows[i], j)]);
        Ok(self.push(Op::GatherRows(a, rows.to_vec()), v, &[a]))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for (i, mut row) in v.row_iter_mut().enumerate() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            } else {
                log::warn!("normalize_rows: row {i} has zero norm; cosine treated as 0");
            }
        }
        self.push(Op::NormalizeRows(a), v, &[a])
    }

    /// Row-major reinterpretation into `rows×cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.len() != rows * cols {
            return Err(shape_err("reshape", m.shape(), (rows, cols)));
        }
        let c0 = m.ncols();
        let v = DMatrix::from_fn(rows, cols, |i, j| {
            let k = i * cols + j;
            m[(k / c0, k % c0)]
        });
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    /// Records a node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: DMatrix<f64>, op: Box<dyn CustomOp>) -> Var {
        self.push(Op::Custom(inputs.to_vec(), op), value, inputs)
    }

    /// Backpropagates from a 1×1 node with unit seed.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        if self.shape(seed) != (1, 1) {
            let (r, c) = self.shape(seed);
            return Err(invalid(format!("backward: seed must be scalar, got {r}x{c}")));
        }
        self.backward_from(&[(seed, DMatrix::from_element(1, 1, 1.0))])
    }

    /// Backpropagates from arbitrary nodes with explicit upstream adjoints.
    pub fn backward_from(&self, seeds: &[(Var, DMatrix<f64>)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<DMatrix<f64>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(shape_err("backward seed", g.shape(), self.shape(*v)));
            }
            accumulate(&mut adj[v.0], g.clone());
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = adj.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            self.propagate(i, g, before)?;
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn send(&self, adj: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut adj[v.0], g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &DMatrix<f64>, adj: &mut [Option<DMatrix<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.send(adj, *a, g.clone());
                self.send(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, g.clone());
                self.send(adj, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g.component_mul(val(b)));
                }
                if self.wants(*b) {
                    self.send(adj, *b, g.component_mul(val(a)));
                }
            }
            Op::Scale(a, s) => self.send(adj, *a, g * *s),
            Op::AddIdentity(a) => self.send(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g * val(b).transpose());
                }
                if self.wants(*b) {
                    self.send(adj, *b, val(a).transpose() * g);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    self.send(adj, *a, g * val(b));
                }
                if self.wants(*b) {
                    self.send(adj, *b, g.transpose() * val(a));
                }
            }
            Op::Transpose(a) => self.send(adj, *a, g.transpose()),
            Op::Linear(x, w, b) => {
                if self.wants(*x) {
                    self.send(adj, *x, g * val(w).transpose());
                }
                if self.wants(*w) {
                    self.send(adj, *w, val(x).transpose() * g);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                        self.send(adj, *b, gb);
                    }
                }
            }
            Op::Conv2d(x, k) => {
                let (xin, ker) = (val(x), val(k));
                let (oh, ow) = g.shape();
                let (kh, kw) = ker.shape();
                if self.wants(*x) {
                    let mut gx = DMatrix::zeros(xin.nrows(), xin.ncols());
                    for b in 0..kw {
                        for a in 0..kh {
                            let kv = ker[(a, b)];
                            for j in 0..ow {
                                for i in 0..oh {
                                    gx[(i + a, j + b)] += kv * g[(i, j)];
                                }
                            }
                        }
                    }
                    self.send(adj, *x, gx);
                }
                if self.wants(*k) {
                    let gk = DMatrix::from_fn(kh, kw, |a, b| {
                        let mut s = 0.0;
                        for j in 0..ow {
                            for i in 0..oh {
                                s += g[(i, j)] * xin[(i + a, j + b)];
                            }
                        }
                        s
                    });
                    self.send(adj, *k, gk);
                }
            }
            Op::Sigmoid(a) => self.send(adj, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => self.send(adj, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Relu(a) => self.send(adj, *a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Log(a) => self.send(adj, *a, g.zip_map(val(a), |g, x| g / x)),
            Op::Exp(a) => self.send(adj, *a, g.component_mul(y)),
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.wants(*p) {
                        self.send(adj, *p, g.view((at, 0), (r, c)).clone_owned());
                    }
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.wants(*p) {
                        self.send(adj, *p, g.view((0, at), (r, c)).clone_owned());
                    }
                    at += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = DMatrix::zeros(r, c);
                ga.view_mut((*start, 0), g.shape()).copy_from(g);
                self.send(adj, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = DMatrix::zeros(r, c);
                ga.view_mut((0, *start), g.shape()).copy_from(g);
                self.send(adj, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.send(adj, *a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                self.send(adj, *a, DMatrix::from_element(r, c, g[(0, 0)] / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                self.send(adj, *a, DMatrix::from_fn(r, c, |_, j| g[(0, j)] / r as f64));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.component_mul(y);
                for (mut row, yrow) in ga.row_iter_mut().zip(y.row_iter()) {
                    let s = row.sum();
                    row -= yrow * s;
                }
                self.send(adj, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let p = y.map(f64::exp);
                let mut ga = g.clone();
                for (mut row, prow) in ga.row_iter_mut().zip(p.row_iter()) {
                    let s = row.sum();
                    row -= prow * s;
                }
                self.send(adj, *a, ga);
            }
            Op::CenterRows(a) => {
                let mut ga = g.clone();
                let means = row_means(g);
                for (mut row, m) in ga.row_iter_mut().zip(means) {
                    row.add_scalar_mut(-m);
                }
                self.send(adj, *a, ga);
            }
            Op::Gram(a) => self.send(adj, *a, (g + g.transpose()) * val(a)),
            Op::Pick(a, entries) => {
                let (r, c) = self.shape(*a);
                let mut ga = DMatrix::zeros(r, c);
                for (k, &e) in entries.iter().enumerate() {
                    ga[e] += g[(k, 0)];
                }
                self.send(adj, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut ga = DMatrix::zeros(r, c);
                for (k, &src) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(src);
                    dst += g.row(k);
                }
                self.send(adj, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = val(a);
                let mut ga = DMatrix::zeros(x.nrows(), x.ncols());
                for i in 0..x.nrows() {
                    let n = x.row(i).norm();
                    if n > 0.0 {
                        let yi = y.row(i);
                        let gi = g.row(i);
                        let proj = yi.dot(&gi);
                        ga.set_row(i, &((gi - yi * proj) / n));
                    }
                }
                self.send(adj, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let gc = g.ncols();
                let ga = DMatrix::from_fn(r, c, |i, j| {
                    let k = i * c + j;
                    g[(k / gc, k % gc)]
                });
                self.send(adj, *a, ga);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&DMatrix<f64>> = inputs.iter().map(val).collect();
                let grads = op.backward(&values, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(invalid(format!(
                        "custom op {}: {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        if gv.shape() != self.shape(*v) {
                            return Err(shape_err(op.name(), gv.shape(), self.shape(*v)));
                        }
                        self.send(adj, *v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

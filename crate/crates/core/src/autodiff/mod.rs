//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every operation appends a node to a [`Tape`] holding its forward value and
//! the information needed to apply its local derivative. [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because a node can only reference nodes created before it.
//!
//! Tensors are row-major matrices; vectors are `1 x n` rows and scalars are
//! `1 x 1`. Only the broadcasting the model needs is provided
//! ([`Tape::add_row`], [`Tape::mul_row`]).
//!
//! ```
//! use dyngraph_ad::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0).requiring_grad());
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.scalar(y), 9.0);
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

pub mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_false")]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                left: [rows, cols],
                right: [values.len(), 1],
            });
        }
        Ok(Tensor {
            shape: [rows, cols],
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            values: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: [rows, cols],
            values: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(1, 1, value)
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor {
            shape: [1, n],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor {
            shape: [n, 1],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiation target.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.values.len()));
        self.grad = grad;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape[1] + col]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanPool(Var, Vec<Vec<usize>>),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: [usize; 2],
    op: Op,
    tracked: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` lies on a tracked
    /// path from a leaf requiring gradients.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `var` into the gradient slot of `tensor`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) {
        let g = self
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.len()]);
        tensor.set_grad(Some(g));
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: [usize; 2], op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), shape[0] * shape[1]);
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a tensor; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad;
        let shape = tensor.shape;
        self.push(tensor.values, shape, Op::Leaf, tracked)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape;
        self.push(tensor.values, shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.node(v).shape
    }

    /// Value of a `1 x 1` node (the first element otherwise).
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape,
            values: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.node(a).tracked || self.node(b).tracked;
        let shape = self.shape(a);
        self.push(value, shape, op, tracked)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.node(a).tracked;
        let shape = self.shape(a);
        self.push(value, shape, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, m: Var, row: Var) -> Result<[usize; 2]> {
        let (sm, sr) = (self.shape(m), self.shape(row));
        if sr != [1, sm[1]] {
            return Err(Error::Shape {
                op,
                left: sm,
                right: sr,
            });
        }
        Ok(sm)
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let [r, c] = self.check_row("add_row", m, row)?;
        let (mv, rv) = (self.value(m), self.value(row));
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            value.extend(mv[i * c..(i + 1) * c].iter().zip(rv).map(|(a, b)| a + b));
        }
        let tracked = self.node(m).tracked || self.node(row).tracked;
        Ok(self.push(value, [r, c], Op::AddRow(m, row), tracked))
    }

    /// Multiplies every row of an `r x c` matrix elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let [r, c] = self.check_row("mul_row", m, row)?;
        let (mv, rv) = (self.value(m), self.value(row));
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            value.extend(mv[i * c..(i + 1) * c].iter().zip(rv).map(|(a, b)| a * b));
        }
        let tracked = self.node(m).tracked || self.node(row).tracked;
        Ok(self.push(value, [r, c], Op::MulRow(m, row), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([n, k], [k2, m]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: [n, k],
                right: [k2, m],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            let out = &mut value[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in out.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += aip * bpj;
                }
            }
        }
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(value, [n, m], Op::MatMul(a, b), tracked))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Sum of all elements, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.node(a).tracked;
        self.push(vec![s], [1, 1], Op::Sum(a), tracked)
    }

    /// Mean of all elements, as a `1 x 1` node. The mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        let tracked = self.node(a).tracked;
        self.push(vec![m], [1, 1], Op::Mean(a), tracked)
    }

    /// Row-wise sums: `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let v = self.value(a);
        let value = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let tracked = self.node(a).tracked;
        self.push(value, [r, 1], Op::SumRows(a), tracked)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let r = self.shape(first)[0];
        for &p in parts {
            if self.shape(p)[0] != r {
                return Err(Error::Shape {
                    op: "concat",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let tracked = parts.iter().any(|&p| self.node(p).tracked);
        Ok(self.push(value, [r, total], Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: [r, c],
                right: [start, end],
            });
        }
        let w = end - start;
        let v = self.value(a);
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let tracked = self.node(a).tracked;
        Ok(self.push(value, [r, w], Op::SliceCols(a, start), tracked))
    }

    /// Selects rows by index (repetitions allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: [r, c],
                right: [bad, 1],
            });
        }
        let v = self.value(a);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            value.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let tracked = self.node(a).tracked;
        Ok(self.push(
            value,
            [rows.len(), c],
            Op::GatherRows(a, rows.to_vec()),
            tracked,
        ))
    }

    /// Output row `g` is the mean of the input rows listed in `groups[g]`;
    /// an empty group yields a zero row.
    pub fn mean_pool(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let [r, c] = self.shape(a);
        if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "mean_pool",
                left: [r, c],
                right: [bad, 1],
            });
        }
        let v = self.value(a);
        let mut value = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let out = &mut value[g * c..(g + 1) * c];
            for &i in members {
                for (o, x) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let tracked = self.node(a).tracked;
        let n = groups.len();
        Ok(self.push(value, [n, c], Op::MeanPool(a, groups), tracked))
    }

    /// Elementwise clamp; the gradient is passed through strictly inside
    /// `[lo, hi]` and is zero where the value is clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |dst| axpy(dst, g, 1.0));
                self.acc(grads, *b, |dst| axpy(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |dst| axpy(dst, g, 1.0));
                self.acc(grads, *b, |dst| axpy(dst, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |dst| {
                    for ((d, gi), y) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                self.acc(grads, *b, |dst| {
                    for ((d, gi), x) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::AddRow(m, row) => {
                let c = node.shape[1];
                self.acc(grads, *m, |dst| axpy(dst, g, 1.0));
                self.acc(grads, *row, |dst| {
                    for chunk in g.chunks(c) {
                        axpy(dst, chunk, 1.0);
                    }
                });
            }
            Op::MulRow(m, row) => {
                let c = node.shape[1];
                let (mv, rv) = (self.value(*m), self.value(*row));
                self.acc(grads, *m, |dst| {
                    for (dchunk, gchunk) in dst.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, gi), r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d += gi * r;
                        }
                    }
                });
                self.acc(grads, *row, |dst| {
                    for (mchunk, gchunk) in mv.chunks(c).zip(g.chunks(c)) {
                        for ((d, gi), x) in dst.iter_mut().zip(gchunk).zip(mchunk) {
                            *d += gi * x;
                        }
                    }
                });
            }
            Op::Scale(a, k) => self.acc(grads, *a, |dst| axpy(dst, g, *k)),
            Op::Offset(a) => self.acc(grads, *a, |dst| axpy(dst, g, 1.0)),
            Op::MatMul(a, b) => {
                let [n, k] = self.shape(*a);
                let m = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G B^T
                self.acc(grads, *a, |dst| {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let bp = &bv[p * m..(p + 1) * m];
                            dst[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                self.acc(grads, *b, |dst| {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            axpy(&mut dst[p * m..(p + 1) * m], gi, aip);
                        }
                    }
                });
            }
            Op::Exp(a) => self.acc_unary(grads, *a, g, |_, y| y, out),
            Op::Log(a) => self.acc_unary(grads, *a, g, |x, _| 1.0 / x, out),
            Op::Sqrt(a) => self.acc_unary(grads, *a, g, |_, y| 0.5 / y, out),
            Op::Square(a) => self.acc_unary(grads, *a, g, |x, _| 2.0 * x, out),
            Op::Tanh(a) => self.acc_unary(grads, *a, g, |_, y| 1.0 - y * y, out),
            Op::Relu(a) => {
                self.acc_unary(grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out)
            }
            Op::Softplus(a) => self.acc_unary(grads, *a, g, |x, _| sigmoid(x), out),
            Op::LogSigmoid(a) => self.acc_unary(grads, *a, g, |x, _| sigmoid(-x), out),
            Op::Sum(a) => self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumRows(a) => {
                let c = self.shape(*a)[1];
                self.acc(grads, *a, |dst| {
                    for (chunk, gi) in dst.chunks_mut(c.max(1)).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    self.acc(grads, p, |dst| {
                        for (i, chunk) in dst.chunks_mut(c.max(1)).enumerate().take(node.shape[0]) {
                            let src = &g[i * total + offset..i * total + offset + c];
                            axpy(chunk, src, 1.0);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a)[1];
                let w = node.shape[1];
                self.acc(grads, *a, |dst| {
                    for i in 0..node.shape[0] {
                        axpy(
                            &mut dst[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                            1.0,
                        );
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let c = node.shape[1];
                self.acc(grads, *a, |dst| {
                    for (k, &i) in rows.iter().enumerate() {
                        axpy(&mut dst[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::MeanPool(a, groups) => {
                let c = node.shape[1];
                self.acc(grads, *a, |dst| {
                    for (gidx, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        let gi = &g[gidx * c..(gidx + 1) * c];
                        for &i in members {
                            axpy(&mut dst[i * c..(i + 1) * c], gi, inv);
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => self.acc_unary(
                grads,
                *a,
                g,
                |x, _| if x > *lo && x < *hi { 1.0 } else { 0.0 },
                out,
            ),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn acc_unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        local: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let input = self.value(a);
        self.acc(grads, a, |dst| {
            for (((d, gi), &x), &y) in dst.iter_mut().zip(g).zip(input).zip(out) {
                *d += gi * local(x, y);
            }
        });
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

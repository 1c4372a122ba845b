//! Dense row-major matrices and a recorded operation tape for reverse-mode
//! differentiation.
//!
//! Model code is written once against the [`Graph`] trait. [`Eager`] evaluates
//! it directly on [`Matrix`] values (inference, benchmarking, walking), while
//! [`Tape`] records every primitive so that [`Tape::backward`] can return the
//! gradient of a scalar root with respect to every parameter leaf. Both
//! backends run the same floating point operations in the same order, so an
//! eager forward pass is bitwise identical to the recorded one.

use std::cell::{Ref, RefCell};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("checkpoint tensor has shape {found:?}, expected {expected:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Row-major `f64` matrix. Column vectors are `n x 1`; a batch of states is
/// stored one sample per column.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// # Panics
    /// If `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer of length {} cannot hold a {rows}x{cols} matrix",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// Stacks column vectors side by side.
    pub fn from_columns(columns: &[[f64; 4]]) -> Self {
        let cols = columns.len();
        let mut m = Self::zeros(4, cols);
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Matrix {
        check_same(what, self, other);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    fn add_assign(&mut self, other: &Matrix) {
        check_same("accumulate", self, other);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        if self.cols != other.rows {
            panic!(
                "matmul shape mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            );
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(n, m, out)
    }

    /// `self * other^T`
    fn matmul_nt(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols);
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Matrix::from_vec(n, m, out)
    }

    /// `self^T * other`
    fn matmul_tn(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows);
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * m..(i + 1) * m];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(n, m, out)
    }

    /// Adds the column vector `col` to every column.
    pub fn add_col(&self, col: &Matrix) -> Matrix {
        if col.cols != 1 || col.rows != self.rows {
            panic!(
                "add_col shape mismatch: {}x{} plus column {}x{}",
                self.rows, self.cols, col.rows, col.cols
            );
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let b = col.data[r];
            for v in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *v += b;
            }
        }
        out
    }

    /// Sums each column, producing a `1 x cols` row.
    pub fn col_sum(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *o += v;
            }
        }
        Matrix::from_vec(1, self.cols, out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        if start + len > self.rows {
            panic!(
                "slice rows {start}..{} out of range for {}x{}",
                start + len,
                self.rows,
                self.cols
            );
        }
        Matrix::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn concat_rows(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                panic!(
                    "concat shape mismatch: {}x{} next to {}x{}",
                    parts[0].rows, cols, m.rows, m.cols
                );
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn check_same(what: &str, a: &Matrix, b: &Matrix) {
    if a.shape() != b.shape() {
        panic!(
            "{what} shape mismatch: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// The primitive operations model code is written against.
pub trait Graph {
    type Node: Clone;

    /// A value that is not differentiated.
    fn constant(&self, value: Matrix) -> Self::Node;
    /// A differentiable leaf.
    fn param(&self, value: &Matrix) -> Self::Node;
    fn value(&self, node: &Self::Node) -> Matrix;

    fn add(&self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn sub(&self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn scale(&self, a: &Self::Node, k: f64) -> Self::Node;
    fn matmul(&self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn mul(&self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn add_col(&self, a: &Self::Node, col: &Self::Node) -> Self::Node;
    fn tanh(&self, a: &Self::Node) -> Self::Node;
    fn sigmoid(&self, a: &Self::Node) -> Self::Node;
    fn sqrt(&self, a: &Self::Node) -> Self::Node;
    fn relu(&self, a: &Self::Node) -> Self::Node;
    fn clamp(&self, a: &Self::Node, lo: f64, hi: f64) -> Self::Node;
    fn sum_squares(&self, a: &Self::Node) -> Self::Node;
    fn sum(&self, a: &Self::Node) -> Self::Node;
    fn col_sum(&self, a: &Self::Node) -> Self::Node;
    fn concat_rows(&self, parts: &[Self::Node]) -> Self::Node;
    fn slice_rows(&self, a: &Self::Node, start: usize, len: usize) -> Self::Node;

    fn is_finite(&self, node: &Self::Node) -> bool {
        self.value(node).is_finite()
    }
}

/// Direct evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Node = Matrix;

    fn constant(&self, value: Matrix) -> Matrix {
        value
    }
    fn param(&self, value: &Matrix) -> Matrix {
        value.clone()
    }
    fn value(&self, node: &Matrix) -> Matrix {
        node.clone()
    }
    fn is_finite(&self, node: &Matrix) -> bool {
        node.is_finite()
    }
    fn add(&self, a: &Matrix, b: &Matrix) -> Matrix {
        a.add(b)
    }
    fn sub(&self, a: &Matrix, b: &Matrix) -> Matrix {
        a.sub(b)
    }
    fn scale(&self, a: &Matrix, k: f64) -> Matrix {
        a.scale(k)
    }
    fn matmul(&self, a: &Matrix, b: &Matrix) -> Matrix {
        a.matmul(b)
    }
    fn mul(&self, a: &Matrix, b: &Matrix) -> Matrix {
        a.hadamard(b)
    }
    fn add_col(&self, a: &Matrix, col: &Matrix) -> Matrix {
        a.add_col(col)
    }
    fn tanh(&self, a: &Matrix) -> Matrix {
        a.map(f64::tanh)
    }
    fn sigmoid(&self, a: &Matrix) -> Matrix {
        a.map(sigmoid)
    }
    fn sqrt(&self, a: &Matrix) -> Matrix {
        a.map(f64::sqrt)
    }
    fn relu(&self, a: &Matrix) -> Matrix {
        a.map(|v| v.max(0.0))
    }
    fn clamp(&self, a: &Matrix, lo: f64, hi: f64) -> Matrix {
        a.map(|v| v.clamp(lo, hi))
    }
    fn sum_squares(&self, a: &Matrix) -> Matrix {
        Matrix::scalar(a.sum_squares())
    }
    fn sum(&self, a: &Matrix) -> Matrix {
        Matrix::scalar(a.sum())
    }
    fn col_sum(&self, a: &Matrix) -> Matrix {
        a.col_sum()
    }
    fn concat_rows(&self, parts: &[Matrix]) -> Matrix {
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::concat_rows(&refs)
    }
    fn slice_rows(&self, a: &Matrix, start: usize, len: usize) -> Matrix {
        a.slice_rows(start, len)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Mul(usize, usize),
    AddCol(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    SumSquares(usize),
    Sum(usize),
    ColSum(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations. Nodes only reference earlier
/// nodes, so reverse index order is a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<usize>>,
}

/// Gradient of a scalar root for each parameter slot, in the order the
/// parameters were registered with [`Graph::param`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub slots: Vec<Matrix>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.borrow().len()
    }

    /// Borrows a node's value without copying it.
    pub fn peek(&self, var: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[var.0].value)
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.0].value), nodes[a.0].needs_grad)
        };
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            (f(&na.value, &nb.value), na.needs_grad || nb.needs_grad)
        };
        self.push(value, op, ng)
    }

    /// Reverse sweep from a scalar `root`. Parameters that do not influence the
    /// root receive exact zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let (rows, cols) = nodes[root.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wants = |j: usize| nodes[j].needs_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(&nodes[*b].value));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, nodes[*a].value.matmul_tn(&g));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.hadamard(&nodes[*b].value));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.hadamard(&nodes[*a].value));
                    }
                }
                Op::AddCol(a, col) => {
                    if wants(*col) {
                        let summed = Matrix::from_vec(
                            g.rows,
                            1,
                            (0..g.rows)
                                .map(|r| g.data[r * g.cols..(r + 1) * g.cols].iter().sum())
                                .collect(),
                        );
                        accumulate(&mut grads, *col, summed);
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Tanh(a) => {
                    let d = g.zip(&node.value, "tanh'", |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip(&node.value, "sigmoid'", |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let d = g.zip(&node.value, "sqrt'", |gv, y| gv * 0.5 / y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip(&nodes[*a].value, "relu'", |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip(&nodes[*a].value, "clamp'", |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::SumSquares(a) => {
                    let k = 2.0 * g.item();
                    accumulate(&mut grads, *a, nodes[*a].value.scale(k));
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::ColSum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        d.data[row * c..(row + 1) * c].copy_from_slice(&g.data);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p].value.rows;
                        if wants(p) {
                            accumulate(&mut grads, p, g.slice_rows(start, len));
                        }
                        start += len;
                    }
                }
                Op::Slice(a, start) => {
                    let src = &nodes[*a].value;
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    let c = src.cols;
                    d.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, d);
                }
            }
        }

        let params = self.params.borrow();
        let slots = params
            .iter()
            .map(|&idx| {
                grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| {
                        let (r, c) = nodes[idx].value.shape();
                        Matrix::zeros(r, c)
                    })
            })
            .collect();
        Ok(Gradients { slots })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn param(&self, value: &Matrix) -> Var {
        let v = self.push(value.clone(), Op::Param, true);
        self.params.borrow_mut().push(v.0);
        v
    }

    fn value(&self, node: &Var) -> Matrix {
        self.nodes.borrow()[node.0].value.clone()
    }

    fn is_finite(&self, node: &Var) -> bool {
        self.nodes.borrow()[node.0].value.is_finite()
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Matrix::add, Op::Add(a.0, b.0))
    }
    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Matrix::sub, Op::Sub(a.0, b.0))
    }
    fn scale(&self, a: &Var, k: f64) -> Var {
        self.unary(*a, |m| m.scale(k), Op::Scale(a.0, k))
    }
    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Matrix::matmul, Op::MatMul(a.0, b.0))
    }
    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Matrix::hadamard, Op::Mul(a.0, b.0))
    }
    fn add_col(&self, a: &Var, col: &Var) -> Var {
        self.binary(*a, *col, Matrix::add_col, Op::AddCol(a.0, col.0))
    }
    fn tanh(&self, a: &Var) -> Var {
        self.unary(*a, |m| m.map(f64::tanh), Op::Tanh(a.0))
    }
    fn sigmoid(&self, a: &Var) -> Var {
        self.unary(*a, |m| m.map(sigmoid), Op::Sigmoid(a.0))
    }
    fn sqrt(&self, a: &Var) -> Var {
        self.unary(*a, |m| m.map(f64::sqrt), Op::Sqrt(a.0))
    }
    fn relu(&self, a: &Var) -> Var {
        self.unary(*a, |m| m.map(|v| v.max(0.0)), Op::Relu(a.0))
    }
    fn clamp(&self, a: &Var, lo: f64, hi: f64) -> Var {
        self.unary(*a, |m| m.map(|v| v.clamp(lo, hi)), Op::Clamp(a.0, lo, hi))
    }
    fn sum_squares(&self, a: &Var) -> Var {
        self.unary(*a, |m| Matrix::scalar(m.sum_squares()), Op::SumSquares(a.0))
    }
    fn sum(&self, a: &Var) -> Var {
        self.unary(*a, |m| Matrix::scalar(m.sum()), Op::Sum(a.0))
    }
    fn col_sum(&self, a: &Var) -> Var {
        self.unary(*a, Matrix::col_sum, Op::ColSum(a.0))
    }
    fn concat_rows(&self, parts: &[Var]) -> Var {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.0].value).collect();
            (
                Matrix::concat_rows(&refs),
                parts.iter().any(|p| nodes[p.0].needs_grad),
            )
        };
        self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()), ng)
    }
    fn slice_rows(&self, a: &Var, start: usize, len: usize) -> Var {
        self.unary(*a, |m| m.slice_rows(start, len), Op::Slice(a.0, start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central differences of `f` at `x`, one entry at a time.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n).abs() / a.abs().max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_matmul_is_noop() {
        let v = Matrix::column(&[0.3, -1.7]);
        assert_eq!(Matrix::identity(2).matmul(&v), v);
    }

    #[test]
    fn activations_at_zero() {
        let z = Matrix::scalar(0.0);
        assert_eq!(Eager.tanh(&z).item(), 0.0);
        assert_eq!(Eager.sigmoid(&z).item(), 0.5);
        assert_eq!(Eager.sum_squares(&Matrix::column(&[3.0, 4.0])).item(), 25.0);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.param(&Matrix::scalar(3.0));
        let y = tape.mul(&w, &w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.slots[0].item(), 6.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(&Matrix::column(&[1.0, 2.0]));
        assert_eq!(
            tape.backward(w).unwrap_err(),
            TensorError::NonScalarRoot { rows: 2, cols: 1 }
        );
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let tape = Tape::new();
        let a = tape.param(&Matrix::column(&[1.0, 2.0]));
        let _b = tape.param(&Matrix::column(&[5.0, 6.0, 7.0]));
        let y = tape.sum_squares(&a);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.slots[1], Matrix::zeros(3, 1));
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch: 2x3 times 2x3")]
    fn shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        Eager.matmul(&a, &a);
    }

    #[test]
    fn matmul_sum_of_squares_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(&mut rng, 4, 4);
        let w = random(&mut rng, 4, 1);
        let tape = Tape::new();
        let wv = tape.param(&w);
        let mv = tape.constant(m.clone());
        let y = tape.sum_squares(&tape.matmul(&mv, &wv));
        let g = tape.backward(y).unwrap();
        let numeric = numeric_grad(&w, |w| m.matmul(w).sum_squares());
        assert!(max_rel_err(&g.slots[0], &numeric) < 1e-6);
    }

    struct Fixtures {
        b: Matrix,
        sq: Matrix,
        a: Matrix,
    }

    trait Case {
        fn build<G: Graph>(&self, g: &G, f: &Fixtures, x: &G::Node) -> G::Node;
    }

    macro_rules! case {
        ($name:ident, |$g:ident, $f:ident, $x:ident| $body:expr) => {
            struct $name;
            impl Case for $name {
                fn build<G: Graph>(&self, $g: &G, $f: &Fixtures, $x: &G::Node) -> G::Node {
                    $body
                }
            }
        };
    }

    case!(AddCase, |g, f, x| g.add(x, &g.constant(f.b.clone())));
    case!(SubCase, |g, f, x| g.sub(&g.constant(f.b.clone()), x));
    case!(ScaleCase, |g, _f, x| g.scale(x, -2.5));
    case!(MatMulCase, |g, f, x| g.matmul(
        &g.matmul(x, &g.constant(f.sq.clone())),
        &g.constant(f.b.clone())
    ));
    case!(MulCase, |g, _f, x| g.mul(x, x));
    case!(AddColCase, |g, f, x| g.add_col(&g.constant(f.a.clone()), x));
    case!(TanhCase, |g, _f, x| g.tanh(x));
    case!(SigmoidCase, |g, _f, x| g.sigmoid(x));
    case!(SqrtCase, |g, _f, x| g.sqrt(x));
    case!(ReluCase, |g, _f, x| g.relu(x));
    case!(ClampCase, |g, _f, x| g.clamp(x, -0.5, 0.5));
    case!(SumSquaresCase, |g, _f, x| g.sum_squares(x));
    case!(SumCase, |g, _f, x| g.scale(&g.sum(&g.mul(x, x)), 0.5));
    case!(ColSumCase, |g, _f, x| {
        let s = g.col_sum(x);
        g.concat_rows(&[s.clone(), g.mul(&s, &s), s])
    });
    case!(ConcatCase, |g, f, x| g.slice_rows(
        &g.concat_rows(&[x.clone(), g.constant(f.b.clone())]),
        2,
        3
    ));
    case!(SliceCase, |g, _f, x| g.concat_rows(&[g.slice_rows(x, 1, 2), g.slice_rows(x, 0, 1)]));

    /// Reduces the case output to a scalar through a fixed weighting so every
    /// output entry contributes with a distinct coefficient.
    fn project(m: &Matrix) -> Matrix {
        let mut p = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                p.set(r, c, 0.3 + 0.17 * r as f64 - 0.11 * c as f64);
            }
        }
        p
    }

    fn scalar_eager(case: &impl Case, f: &Fixtures, x: &Matrix) -> f64 {
        let out = case.build(&Eager, f, x);
        out.hadamard(&project(&out)).sum()
    }

    fn grad_tape(case: &impl Case, f: &Fixtures, x: &Matrix) -> Matrix {
        let tape = Tape::new();
        let xv = tape.param(x);
        let out = case.build(&tape, f, &xv);
        let weights = project(&tape.peek(out));
        let p = tape.constant(weights);
        let y = tape.sum(&tape.mul(&out, &p));
        tape.backward(y).unwrap().slots.remove(0)
    }

    fn check(name: &str, case: &impl Case, f: &Fixtures, x: &Matrix) {
        let analytic = grad_tape(case, f, x);
        let numeric = numeric_grad(x, |x| scalar_eager(case, f, x));
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "primitive {name}: rel err {err:e}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let f = Fixtures {
                b: random(&mut rng, 3, 4),
                sq: random(&mut rng, 4, 3),
                a: random(&mut rng, 3, 4),
            };
            let x = random(&mut rng, 3, 4);
            // keep away from the relu/clamp kinks
            let x = x.map(|v| if (v.abs() - 0.5).abs() < 1e-3 || v.abs() < 1e-3 { v + 0.01 } else { v });
            let col = random(&mut rng, 3, 1);
            let pos = x.map(|v| v.abs() + 0.5);
            check("add", &AddCase, &f, &x);
            check("sub", &SubCase, &f, &x);
            check("scale", &ScaleCase, &f, &x);
            check("matmul", &MatMulCase, &f, &x);
            check("mul", &MulCase, &f, &x);
            check("add_col", &AddColCase, &f, &col);
            check("tanh", &TanhCase, &f, &x);
            check("sigmoid", &SigmoidCase, &f, &x);
            check("sqrt", &SqrtCase, &f, &pos);
            check("relu", &ReluCase, &f, &x);
            check("clamp", &ClampCase, &f, &x);
            check("sum_squares", &SumSquaresCase, &f, &x);
            check("sum", &SumCase, &f, &x);
            check("col_sum", &ColSumCase, &f, &x);
            check("concat", &ConcatCase, &f, &x);
            check("slice", &SliceCase, &f, &x);
        }
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = random(&mut rng, 3, 2);
        let m = random(&mut rng, 2, 3);
        let run = |a: f64, b: f64| {
            let tape = Tape::new();
            let w = tape.param(&w0);
            let mv = tape.constant(m.clone());
            let f = tape.sum_squares(&tape.tanh(&tape.matmul(&w, &mv)));
            let g = tape.sum(&tape.sigmoid(&w));
            let y = tape.add(&tape.scale(&f, a), &tape.scale(&g, b));
            tape.backward(y).unwrap().slots.remove(0)
        };
        let combined = run(2.0, -3.0);
        let expected = run(1.0, 0.0).scale(2.0).add(&run(0.0, 1.0).scale(-3.0));
        assert!(combined.sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = random(&mut rng, 4, 4);
        let x0 = random(&mut rng, 4, 3);
        let run = || {
            let tape = Tape::new();
            let w = tape.param(&w0);
            let x = tape.constant(x0.clone());
            let y = tape.sum_squares(&tape.tanh(&tape.matmul(&w, &x)));
            (tape.value(&y), tape.backward(y).unwrap().slots)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.data(), b.data());
        for (x, y) in ga.iter().zip(&gb) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn two_layer_tanh_network_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w1 = random(&mut rng, 5, 3);
        let b1 = random(&mut rng, 5, 1);
        let w2 = random(&mut rng, 1, 5);
        let x = random(&mut rng, 3, 1);
        let eval = |w1: &Matrix, b1: &Matrix, w2: &Matrix| {
            w2.matmul(&w1.matmul(&x).add(b1).map(f64::tanh)).item()
        };
        let tape = Tape::new();
        let (v1, vb, v2) = (tape.param(&w1), tape.param(&b1), tape.param(&w2));
        let xv = tape.constant(x.clone());
        let h = tape.tanh(&tape.add_col(&tape.matmul(&v1, &xv), &vb));
        let y = tape.sum(&tape.matmul(&v2, &h));
        let g = tape.backward(y).unwrap();
        let n1 = numeric_grad(&w1, |w| eval(w, &b1, &w2));
        let nb = numeric_grad(&b1, |b| eval(&w1, b, &w2));
        let n2 = numeric_grad(&w2, |w| eval(&w1, &b1, w));
        assert!(max_rel_err(&g.slots[0], &n1) < 1e-5);
        assert!(max_rel_err(&g.slots[1], &nb) < 1e-5);
        assert!(max_rel_err(&g.slots[2], &n2) < 1e-5);
    }
}

//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! A [`Tensor`] is a plain value (shape, row-major data, optional gradient).
//! Differentiable computation happens on a [`Tape`]: tensors are copied onto
//! it as leaves, every operation appends a node, and [`Tape::backward`] walks
//! the nodes in exact reverse order of execution. A fresh tape is built for
//! every forward pass, so gate sampling is free to change the graph.

use crate::error::TensorError;

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Empty { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    /// Marks the tensor as trainable. Returns `self` for chaining.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Value at a 2-D index.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    RoundSte(Var),
    Clip(Var, f64, f64),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>),
    CumProd(Var),
    Concat(Vec<Var>),
    Select(Var, usize),
    Slice2d {
        src: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    LayerNorm(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    reversed: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => {
            let n = *shape.last().unwrap();
            (shape.iter().product::<usize>() / n, n)
        }
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the value of `v` out as a fresh tensor without gradient state.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Records `t` as a leaf; it participates in the reverse pass iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        let (_, n) = rows_cols(&sa);
        if sr.len() != 1 || sr[0] != n || sa.is_empty() {
            return Err(TensorError::Shape {
                op: name,
                lhs: sa,
                rhs: sr,
            });
        }
        let r = self.value(row);
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(sa, value, op, rg))
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(s).to_vec(),
            });
        }
        let k = self.item(s);
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MulScalar(a, s), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a, k), |x| x * k)
    }

    /// Addition of a constant.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Offset(a), |x| x + k)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Round-to-nearest (ties to even) forward, identity backward.
    pub fn round_ste(&mut self, a: Var) -> Var {
        self.map(a, Op::RoundSte(a), f64::round_ties_even)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient 1 on the closed interval, 0 outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo < hi) {
            return Err(TensorError::Range { lo, hi });
        }
        Ok(self.map(a, Op::Clip(a, lo, hi), |x| x.clamp(lo, hi)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        let value = self.value(a).chunks(n).flat_map(softmax_row).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Softmax(a), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits[m×c]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Label { label: bad, classes: c });
        }
        let mut total = 0.0;
        for (row, &y) in self.value(logits).chunks(c).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![total / labels.len() as f64],
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    /// Running product of a 1-D node.
    pub fn cumprod(&mut self, a: Var) -> Var {
        let mut acc = 1.0;
        let value = self
            .value(a)
            .iter()
            .map(|&x| {
                acc *= x;
                acc
            })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::CumProd(a), rg)
    }

    /// Concatenates flattened nodes into one 1-D node.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).to_vec()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![value.len()], value, Op::Concat(parts.to_vec()), rg)
    }

    /// Element `idx` of the flattened node, as a scalar.
    pub fn select(&mut self, a: Var, idx: usize) -> Result<Var, TensorError> {
        let v = self.value(a);
        if idx >= v.len() {
            return Err(TensorError::Index { index: idx, len: v.len() });
        }
        let x = v[idx];
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), vec![x], Op::Select(a, idx), rg))
    }

    /// Sub-block `[row0..row0+rows, col0..col0+cols]` of a 2-D node.
    pub fn slice2d(
        &mut self,
        a: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || row0 + rows > shape[0] || col0 + cols > shape[1] || rows == 0 || cols == 0
        {
            return Err(TensorError::Shape {
                op: "slice2d",
                lhs: shape,
                rhs: vec![row0 + rows, col0 + cols],
            });
        }
        let src = self.value(a);
        let n = shape[1];
        let mut value = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            value.extend_from_slice(&src[i * n + col0..i * n + col0 + cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, cols], value, Op::Slice2d { src: a, row0, col0 }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != first[1] {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let value: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).to_vec()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, first[1]], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != first[0] {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let m = first[0];
        let mut value = vec![0.0; m * cols];
        let mut c0 = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let v = self.value(p);
            for i in 0..m {
                value[i * cols + c0..i * cols + c0 + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            c0 += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, cols], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                shape,
            });
        }
        let value = transpose_raw(self.value(a), shape[0], shape[1]);
        let rg = self.rg(a);
        Ok(self.push(vec![shape[1], shape[0]], value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|row| {
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter().map(move |x| (x - mu) * inv).collect::<Vec<_>>()
            })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::LayerNorm(a), rg)
    }

    /// Runs the reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.reversed {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.reversed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last loss with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes.get(v.0)?.requires_grad {
            return None;
        }
        self.grads.get(v.0)?.as_deref()
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient slot.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                let n = self.value(*row).len();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                }
                acc(*row, gr);
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let n = r.len();
                let va = self.value(*a);
                acc(
                    *a,
                    g.chunks(n)
                        .flat_map(|c| c.iter().zip(r).map(|(g, y)| g * y))
                        .collect(),
                );
                let mut gr = vec![0.0; n];
                for (gc, xc) in g.chunks(n).zip(va.chunks(n)) {
                    for j in 0..n {
                        gr[j] += gc[j] * xc[j];
                    }
                }
                acc(*row, gr);
            }
            Op::MulScalar(a, s) => {
                let k = self.item(*s);
                acc(*a, g.iter().map(|x| x * k).collect());
                let dot = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).sum();
                acc(*s, vec![dot]);
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::Offset(a) | Op::RoundSte(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Exp(a) => acc(*a, g.iter().zip(&node.value).map(|(g, y)| g * y).collect()),
            Op::Log(a) => acc(
                *a,
                g.iter().zip(self.value(*a)).map(|(g, x)| g / x).collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(&node.value)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(&node.value)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::Clip(a, lo, hi) => acc(
                *a,
                g.iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(a) => {
                let (_, n) = rows_cols(&node.shape);
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(node.value.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    out.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                acc(*a, out);
            }
            Op::CrossEntropy(logits, labels) => {
                let c = self.shape(*logits)[1];
                let m = labels.len() as f64;
                let mut out = Vec::with_capacity(self.value(*logits).len());
                for (row, &y) in self.value(*logits).chunks(c).zip(labels) {
                    let p = softmax_row(row);
                    out.extend(
                        p.iter()
                            .enumerate()
                            .map(|(j, &pj)| g[0] * (pj - if j == y { 1.0 } else { 0.0 }) / m),
                    );
                }
                acc(*logits, out);
            }
            Op::CumProd(a) => {
                // d y_i / d x_j = y_i / x_j for j <= i; computed without division
                // so zero entries are handled.
                let x = self.value(*a);
                let n = x.len();
                let mut out = vec![0.0; n];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut prefix: f64 = x[..j].iter().product();
                    let mut s = 0.0;
                    for i in j..n {
                        if i > j {
                            prefix *= x[i];
                        }
                        s += g[i] * prefix;
                    }
                    *o = s;
                }
                acc(*a, out);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Select(a, i) => {
                let mut out = vec![0.0; self.value(*a).len()];
                out[*i] = g[0];
                acc(*a, out);
            }
            Op::Slice2d { src, row0, col0 } => {
                let n = self.shape(*src)[1];
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let mut out = vec![0.0; self.value(*src).len()];
                for i in 0..rows {
                    let dst = (row0 + i) * n + col0;
                    out[dst..dst + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                acc(*src, out);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, cols) = (node.shape[0], node.shape[1]);
                let mut c0 = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut out = Vec::with_capacity(m * w);
                    for i in 0..m {
                        out.extend_from_slice(&g[i * cols + c0..i * cols + c0 + w]);
                    }
                    acc(p, out);
                    c0 += w;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                acc(*a, transpose_raw(g, m, n));
            }
            Op::LayerNorm(a) => {
                let (_, n) = rows_cols(&node.shape);
                let x = self.value(*a);
                let mut out = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(n).zip(node.value.chunks(n)).zip(x.chunks(n)) {
                    let mu = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    out.extend(gr.iter().zip(yr).map(|(g, y)| inv * (g - gm - y * gy)));
                }
                acc(*a, out);
            }
        }
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

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aik * bv);
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

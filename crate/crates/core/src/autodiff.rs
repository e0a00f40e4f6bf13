//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed during a forward pass as a node on a
//! linear tape. Nodes are appended in execution order, so the tape is already in
//! topological order and [`Graph::backward`] simply walks it in reverse, applying each
//! node's local vector-Jacobian product once per input edge.
//!
//! Shapes follow a small set of conventions:
//! - matrices are `[rows, cols]`, row vectors used for broadcasting are 1-D `[cols]`;
//! - reductions to a single value produce a scalar of shape `[]`;
//! - `*_row` operations broadcast a `[cols]` vector over every row of a matrix,
//!   `mul_col` broadcasts a `[rows]` vector over every column.
//!
//! A graph belongs to one training step. Build a fresh one (or call [`Graph::clear`])
//! before the next step; calling `backward` twice on the same tape is an error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOp {
    Add,
    Sub,
    Mul,
    Div,
}

type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Row(RowOp, Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    MeanLastAxis(Var),
    SelectRow(Var, usize),
    SelectCol(Var, usize),
    Slice(Var, usize),
    Reshape(Var),
    Custom(Vec<Var>, CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation plus, after [`Graph::backward`], the gradients of its nodes.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Drops all recorded nodes and gradients so the graph can serve a new step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `x` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `x`.
    ///
    /// Populated for every node that requires a gradient, zero-filled when no path to
    /// the root exists.
    pub fn grad(&self, x: Var) -> Option<&Tensor<T>> {
        self.grads.get(x.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    fn row_op(&mut self, kind: RowOp, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("row broadcast", a)?;
        let vb = self.value(b);
        if vb.ndim() != 1 || vb.len() != n {
            return Err(Error::dim("row broadcast", self.value(a).shape(), vb.shape()));
        }
        let va = self.value(a);
        let bd = vb.data();
        let data = va
            .data()
            .chunks(n)
            .flat_map(|row| {
                row.iter().zip(bd).map(move |(&x, &y)| match kind {
                    RowOp::Add => x + y,
                    RowOp::Sub => x - y,
                    RowOp::Mul => x * y,
                    RowOp::Div => x / y,
                })
            })
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Row(kind, a, b)))
    }

    /// `a[i, j] + b[j]`
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(RowOp::Add, a, b)
    }

    /// `a[i, j] - b[j]`
    pub fn sub_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(RowOp::Sub, a, b)
    }

    /// `a[i, j] * b[j]`
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(RowOp::Mul, a, b)
    }

    /// `a[i, j] / b[j]`
    pub fn div_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op(RowOp::Div, a, b)
    }

    /// `a[i, j] * v[i]`
    pub fn mul_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mul_col", a)?;
        let vv = self.value(v);
        if vv.ndim() != 1 || vv.len() != m {
            return Err(Error::dim("mul_col", self.value(a).shape(), vv.shape()));
        }
        let vd = vv.data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .zip(vd)
            .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MulCol(a, v)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < T::zero()) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let v = self.value(a).map(T::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    fn check_finite(&self, op: &str, a: Var) -> Result<()> {
        if !self.value(a).all_finite() {
            return Err(Error::Numeric(format!("{op} received non-finite input")));
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("softmax", a)?;
        self.check_finite("softmax", a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(a)))
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("log_softmax", a)?;
        self.check_finite("log_softmax", a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(a)))
    }

    /// Gathers `a[i, idx[i]]` into a vector of length `rows`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, c) = self.matrix_dims("pick", a)?;
        if idx.len() != m {
            return Err(Error::dim("pick", &[m, c], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let va = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| va.at(i, j)).collect();
        Ok(self.push(Tensor::from_parts(vec![m], data), Op::Pick(a, idx.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of_usize(v.len());
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    fn column_sums(&self, a: Var) -> Result<(usize, Vec<T>)> {
        let (m, n) = self.matrix_dims("row reduction", a)?;
        let mut acc = vec![T::zero(); n];
        for row in self.value(a).data().chunks(n) {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s = *s + x;
            }
        }
        Ok((m, acc))
    }

    /// Sums over rows: `[m, n] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, acc) = self.column_sums(a)?;
        Ok(self.push(Tensor::vector(acc), Op::SumRows(a)))
    }

    /// Averages over rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, acc) = self.column_sums(a)?;
        let inv = T::of_usize(m);
        let data = acc.into_iter().map(|s| s / inv).collect();
        Ok(self.push(Tensor::vector(data), Op::MeanRows(a)))
    }

    /// Averages over the last axis of a rank-3 tensor: `[n, c, s] -> [n, c]`.
    pub fn mean_last_axis(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Contract(format!("mean_last_axis expects [n, c, s], got {s:?}")));
        }
        let denom = T::of_usize(s[2]);
        let data = self
            .value(a)
            .data()
            .chunks(s[2])
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1]], data), Op::MeanLastAxis(a)))
    }

    pub fn select_row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (m, _) = self.matrix_dims("select_row", a)?;
        if r >= m {
            return Err(Error::Contract(format!("row {r} out of range for {m} rows")));
        }
        let row = self.value(a).row(r).to_vec();
        Ok(self.push(Tensor::vector(row), Op::SelectRow(a, r)))
    }

    pub fn select_col(&mut self, a: Var, c: usize) -> Result<Var> {
        let (_, n) = self.matrix_dims("select_col", a)?;
        if c >= n {
            return Err(Error::Contract(format!("column {c} out of range for {n} columns")));
        }
        let col = self.value(a).data().chunks(n).map(|r| r[c]).collect();
        Ok(self.push(Tensor::vector(col), Op::SelectCol(a, c)))
    }

    /// Takes a contiguous run of the flattened data starting at `offset`, reshaped to `shape`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(a);
        if offset + len > src.len() {
            return Err(Error::dim("slice", src.shape(), shape));
        }
        let data = src.data()[offset..offset + len].to_vec();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Slice(a, offset)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Records a user-defined operation.
    ///
    /// `backward` receives the input values and the upstream gradient, and returns one
    /// gradient per input, each shaped like that input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), Box::new(backward)))
    }

    /// Accumulates `d root / d node` for every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this graph; clear it before reuse".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.requires_grad && i != root.0 {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(d) {
                        *a = *a + b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), d));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let bt = transpose_raw(val(*b).data(), k, n);
                send(*a, matmul_raw(gd, &bt, m, n, k));
                let at = transpose_raw(val(*a).data(), m, k);
                send(*b, matmul_raw(&at, gd, k, m, n));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                send(*a, transpose_raw(gd, s[0], s[1]));
            }
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                send(*a, gd.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                send(*b, gd.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, c) => send(*a, gd.iter().map(|&d| d * *c).collect()),
            Op::AddScalar(a) => send(*a, gd.to_vec()),
            Op::Row(kind, a, b) => {
                let n = val(*b).len();
                let (va, vb) = (val(*a).data(), val(*b).data());
                let mut db = vec![T::zero(); n];
                let mut da = Vec::with_capacity(gd.len());
                for (idx, (&d, &x)) in gd.iter().zip(va).enumerate() {
                    let j = idx % n;
                    let y = vb[j];
                    let (ga, gb) = match kind {
                        RowOp::Add => (d, d),
                        RowOp::Sub => (d, -d),
                        RowOp::Mul => (d * y, d * x),
                        RowOp::Div => (d / y, -d * x / (y * y)),
                    };
                    da.push(ga);
                    db[j] = db[j] + gb;
                }
                send(*a, da);
                send(*b, db);
            }
            Op::MulCol(a, v) => {
                let n = val(*a).shape()[1];
                let (va, vv) = (val(*a).data(), val(*v).data());
                let mut da = Vec::with_capacity(gd.len());
                let mut dv = vec![T::zero(); vv.len()];
                for (r, (grow, arow)) in gd.chunks(n).zip(va.chunks(n)).enumerate() {
                    for (&d, &x) in grow.iter().zip(arow) {
                        da.push(d * vv[r]);
                        dv[r] = dv[r] + d * x;
                    }
                }
                send(*a, da);
                send(*v, dv);
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(va)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let va = val(*a).data();
                send(*a, gd.iter().zip(va).map(|(&d, &x)| two * x * d).collect());
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                let out = node.value.data();
                send(*a, gd.iter().zip(out).map(|(&d, &y)| d / (two * y)).collect());
            }
            Op::Softmax(a) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(c).zip(y.chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&d, &p)| p * (d - dot)));
                }
                send(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(c).zip(y.chunks(c)) {
                    let total: T = grow.iter().copied().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&d, &l)| d - l.exp() * total));
                }
                send(*a, dx);
            }
            Op::Pick(a, idx) => {
                let c = val(*a).shape()[1];
                let mut dx = vec![T::zero(); val(*a).len()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * c + j] = gd[i];
                }
                send(*a, dx);
            }
            Op::Sum(a) => send(*a, vec![gd[0]; val(*a).len()]),
            Op::Mean(a) => {
                let len = val(*a).len();
                send(*a, vec![gd[0] / T::of_usize(len); len]);
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let m = val(*a).shape()[0];
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    T::one() / T::of_usize(m)
                } else {
                    T::one()
                };
                let mut dx = Vec::with_capacity(val(*a).len());
                for _ in 0..m {
                    dx.extend(gd.iter().map(|&d| d * scale));
                }
                send(*a, dx);
            }
            Op::MeanLastAxis(a) => {
                let s = val(*a).shape()[2];
                let inv = T::one() / T::of_usize(s);
                send(*a, gd.iter().flat_map(|&d| std::iter::repeat_n(d * inv, s)).collect());
            }
            Op::SelectRow(a, r) => {
                let n = val(*a).shape()[1];
                let mut dx = vec![T::zero(); val(*a).len()];
                dx[r * n..(r + 1) * n].copy_from_slice(gd);
                send(*a, dx);
            }
            Op::SelectCol(a, c) => {
                let n = val(*a).shape()[1];
                let mut dx = vec![T::zero(); val(*a).len()];
                for (i, &d) in gd.iter().enumerate() {
                    dx[i * n + c] = d;
                }
                send(*a, dx);
            }
            Op::Slice(a, offset) => {
                let mut dx = vec![T::zero(); val(*a).len()];
                dx[*offset..*offset + gd.len()].copy_from_slice(gd);
                send(*a, dx);
            }
            Op::Reshape(a) => send(*a, gd.to_vec()),
            Op::Custom(inputs, backward) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                for (v, d) in inputs.iter().zip(backward(&vals, g)) {
                    send(*v, d.into_data());
                }
            }
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Row(_, a, b) | Op::MulCol(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Pick(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::MeanRows(a)
        | Op::MeanLastAxis(a)
        | Op::SelectRow(a, _)
        | Op::SelectCol(a, _)
        | Op::Slice(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::Custom(inputs, _) => inputs.clone(),
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Copy>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for j in 0..n {
        for i in 0..m {
            out.push(a[i * n + j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(mat(&[&[1.0, 2.0]]));
        let b = g.constant(mat(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_backward_rule() {
        let mut g = Graph::new();
        let a = g.param(mat(&[&[1.0, 2.0]]));
        let b = g.param(mat(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn relu_forward_and_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0, -3.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-3.0, -0.5, -7.0]));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, 0.0], &[1000.0, 1000.0], &[1.0f64.ln(), 3.0f64.ln()]]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 0.25).abs() < 1e-15);
        assert!((v[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[f64::NAN, 0.0]]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
        let x = g.constant(mat(&[&[f64::INFINITY, 0.0]]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_input_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.detach(x);
        let sq = g.square(d);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn double_backward_rejected_until_cleared() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.clear();
        assert!(g.is_empty());
        let x = g.param(Tensor::vector(vec![1.0]));
        let s = g.sum(x);
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x * x + x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.5, -2.0]));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn row_and_column_broadcasts() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(Tensor::vector(vec![10.0, 20.0]));
        let v = g.constant(Tensor::vector(vec![2.0, -1.0]));
        let r = g.add_row(a, b).unwrap();
        assert_eq!(g.value(r).data(), &[11.0, 22.0, 13.0, 24.0]);
        let r = g.div_row(a, b).unwrap();
        assert_eq!(g.value(r).data(), &[0.1, 0.1, 0.3, 0.2]);
        let c = g.mul_col(a, v).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0, -3.0, -4.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(g.add_row(a, bad).is_err());
        assert!(g.mul_col(a, bad).is_err());
    }

    #[test]
    fn pick_checks_label_range() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.pick(a, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0]);
        assert!(matches!(g.pick(a, &[0, 2]), Err(Error::Label { .. })));
    }

    #[test]
    fn mean_last_axis_pools() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap());
        let p = g.mean_last_axis(a).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2]);
        assert_eq!(g.value(p).data(), &[2.0, 5.0]);
    }
}

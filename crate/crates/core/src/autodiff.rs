//! Define-by-run reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] records every operation applied to its nodes. Leaves created
//! with `requires_grad = true` accumulate gradients when [`Graph::backward`]
//! is called on a scalar root. Calling `backward` twice without
//! [`Graph::zero_grad`] adds the second pass onto the first.
//!
//! All tensors are row-major matrices. Binary elementwise ops broadcast a
//! `(1, c)` row, an `(r, 1)` column or a `(1, 1)` scalar against the other
//! operand.
//!
//! ```
//! use loco_core::autodiff::Graph;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(1, 1, vec![3.0]);
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type usable in a [`Graph`].
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `C = alpha * A B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    const NAME: &'static str;
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident, $name:literal) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
                let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
                assert!(max_a >= 0 && (max_a as usize) < a.len());
                assert!(max_b >= 0 && (max_b as usize) < b.len());
                // SAFETY: bounds of every strided access were checked above and
                // `c` is exclusively borrowed with at least m*n elements.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            const NAME: &'static str = $name;
        }
    };
}

impl_real!(f32, sgemm, "f32");
impl_real!(f64, dgemm, "f64");

/// A dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape(format!("tensor of shape [{rows}, {cols}] cannot hold {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, T),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Elu(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, T, T),
    SumRows(NodeId),
    SumAll(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    StopGradient(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recorded computation. Nodes are appended in creation order, so parents
/// always precede their children.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sum `grad` (shape `rows x cols`) down to shape `tr x tc`.
fn reduce_to<T: Real>(grad: &[T], rows: usize, cols: usize, tr: usize, tc: usize) -> Vec<T> {
    if tr == rows && tc == cols {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); tr * tc];
    for r in 0..rows {
        let orow = if tr == 1 { 0 } else { r };
        for c in 0..cols {
            let ocol = if tc == 1 { 0 } else { c };
            out[orow * tc + ocol] = out[orow * tc + ocol] + grad[r * cols + c];
        }
    }
    out
}

#[inline]
fn bidx(r: usize, c: usize, rows: usize, cols: usize) -> usize {
    (if rows == 1 { 0 } else { r }) * cols + if cols == 1 { 0 } else { c }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

#[inline]
fn elu<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates gradients.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Convenience: trainable leaf from raw parts. Panics on inconsistent shape.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<T>) -> NodeId {
        let t = Tensor::new(rows, cols, data).expect("param shape");
        self.leaf(t, true)
    }

    /// Convenience: constant from raw parts. Panics on inconsistent shape.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> NodeId {
        let t = Tensor::new(rows, cols, data).expect("input shape");
        self.constant(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.node(id).value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.node(id).value.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.node(id).grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).needs_grad
    }

    /// Direct inputs of a node, in operand order.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.node(id).op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Elu(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Clamp(a, ..)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::StopGradient(a) => vec![*a],
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary_shape(&self, name: &str, a: NodeId, b: NodeId) -> Result<[usize; 2]> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        match (broadcast_dim(sa[0], sb[0]), broadcast_dim(sa[1], sb[1])) {
            (Some(r), Some(c)) => Ok([r, c]),
            _ => Err(Error::Shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}"))),
        }
    }

    fn elementwise(&mut self, name: &str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        let [r, c] = self.binary_shape(name, a, b)?;
        let va = &self.node(a).value;
        let vb = &self.node(b).value;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(va.data[bidx(i, j, va.rows, va.cols)], vb.data[bidx(i, j, vb.rows, vb.cols)]));
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { rows: r, cols: c, data: out }, op, ng))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let v = &self.node(a).value;
        let t = Tensor { rows: v.rows, cols: v.cols, data: v.data.iter().map(|&x| f(x)).collect() };
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul: [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.node(a).value.data,
            k as isize,
            1,
            &self.node(b).value.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { rows: m, cols: n, data: out }, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x` for `x >= 0`, `e^x - 1` otherwise.
    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise sum, `[r, c] -> [r, 1]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let data = (0..v.rows).map(|r| v.row(r).iter().copied().sum()).collect();
        let t = Tensor { rows: v.rows, cols: 1, data };
        let ng = self.ng(&[a]);
        self.push(t, Op::SumRows(a), ng)
    }

    /// Row-wise squared euclidean norm, `[r, c] -> [r, 1]`.
    pub fn sq_norm_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.square(a);
        self.sum_rows(s)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.node(a).value.data.iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.node(a).value;
        let s: T = v.data.iter().copied().sum();
        let m = s / T::of(v.data.len() as f64);
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: no inputs".into()));
        }
        let rows = self.shape(parts[0])[0];
        if let Some(bad) = parts.iter().find(|p| self.shape(**p)[0] != rows) {
            return Err(Error::Shape(format!(
                "concat: row mismatch {:?} vs {:?}",
                self.shape(parts[0]),
                self.shape(*bad)
            )));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.node(*p).value.row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor { rows, cols, data }, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let [rows, cols] = self.shape(a);
        if start >= end || end > cols {
            return Err(Error::Shape(format!("slice_cols: {start}..{end} of [{rows}, {cols}]")));
        }
        let v = &self.node(a).value;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { rows, cols: end - start, data }, Op::SliceCols(a, start), ng))
    }

    /// `out.data[i] = a.data[index[i]]`, shaped `[rows, cols]`.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>, rows: usize, cols: usize) -> Result<NodeId> {
        let n = self.node(a).value.data.len();
        if index.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("gather: {} indices for [{rows}, {cols}]", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather: index {bad} out of range for {n} values")));
        }
        let v = &self.node(a).value.data;
        let data = index.iter().map(|&i| v[i]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { rows, cols, data }, Op::Gather(a, index), ng))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = &self.node(a).value;
        if rows * cols != v.data.len() || rows == 0 {
            return Err(Error::Shape(format!("reshape: {:?} -> [{rows}, {cols}]", v.shape())));
        }
        let t = Tensor { rows, cols, data: v.data.clone() };
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Identity forward; blocks every gradient toward `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let t = self.node(a).value.clone();
        self.push(t, Op::StopGradient(a), false)
    }

    /// Reverse pass from a scalar root. Gradients are added to every leaf
    /// created with `requires_grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(Error::Shape(format!("backward: root must be scalar, got {shape:?}")));
        }
        if !self.node(root).needs_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                accumulate(&mut self.nodes[i].grad, g);
                continue;
            }
            self.propagate(i, g, &mut adj);
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], to: NodeId, g: Vec<T>) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut adj[to.0], g);
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: Vec<T>, adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let (r, c) = (out.rows, out.cols);
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let va = &self.node(*a).value;
                let vb = &self.node(*b).value;
                let (m, k, n) = (va.rows, va.cols, vb.cols);
                if self.wants(*a) {
                    // dA = dC B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, n as isize, 1, &vb.data, 1, n as isize, T::zero(), &mut da);
                    self.send(adj, *a, da);
                }
                if self.wants(*b) {
                    // dB = A^T dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &va.data, 1, k as isize, &g, n as isize, 1, T::zero(), &mut db);
                    self.send(adj, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                if self.wants(*a) {
                    self.send(adj, *a, reduce_to(&g, r, c, sa[0], sa[1]));
                }
                if self.wants(*b) {
                    let mut gb = reduce_to(&g, r, c, sb[0], sb[1]);
                    if neg {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.send(adj, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let va = &self.node(*a).value;
                let vb = &self.node(*b).value;
                if self.wants(*a) {
                    let mut full = Vec::with_capacity(r * c);
                    for ii in 0..r {
                        for jj in 0..c {
                            let y = vb.data[bidx(ii, jj, vb.rows, vb.cols)];
                            let gg = g[ii * c + jj];
                            full.push(if div { gg / y } else { gg * y });
                        }
                    }
                    self.send(adj, *a, reduce_to(&full, r, c, va.rows, va.cols));
                }
                if self.wants(*b) {
                    let mut full = Vec::with_capacity(r * c);
                    for ii in 0..r {
                        for jj in 0..c {
                            let x = va.data[bidx(ii, jj, va.rows, va.cols)];
                            let y = vb.data[bidx(ii, jj, vb.rows, vb.cols)];
                            let gg = g[ii * c + jj];
                            full.push(if div { -gg * x / (y * y) } else { gg * x });
                        }
                    }
                    self.send(adj, *b, reduce_to(&full, r, c, vb.rows, vb.cols));
                }
            }
            Op::AddScalar(a) => self.send(adj, *a, g),
            Op::MulScalar(a, s) => self.send(adj, *a, g.iter().map(|&x| x * *s).collect()),
            Op::Neg(a) => self.send(adj, *a, g.iter().map(|&x| -x).collect()),
            Op::Exp(a) => {
                let d = g.iter().zip(&out.data).map(|(&gg, &y)| gg * y).collect();
                self.send(adj, *a, d);
            }
            Op::Log(a) => {
                let x = &self.node(*a).value.data;
                self.send(adj, *a, g.iter().zip(x).map(|(&gg, &x)| gg / x).collect());
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(&out.data).map(|(&gg, &y)| gg * (T::one() - y * y)).collect();
                self.send(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(&out.data).map(|(&gg, &y)| gg * y * (T::one() - y)).collect();
                self.send(adj, *a, d);
            }
            Op::Elu(a) => {
                let x = &self.node(*a).value.data;
                let d = g
                    .iter()
                    .zip(x.iter().zip(&out.data))
                    .map(|(&gg, (&x, &y))| if x >= T::zero() { gg } else { gg * (y + T::one()) })
                    .collect();
                self.send(adj, *a, d);
            }
            Op::Relu(a) => {
                let x = &self.node(*a).value.data;
                let d = g.iter().zip(x).map(|(&gg, &x)| if x > T::zero() { gg } else { T::zero() }).collect();
                self.send(adj, *a, d);
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                let d = g.iter().zip(&out.data).map(|(&gg, &y)| gg / (two * y)).collect();
                self.send(adj, *a, d);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let x = &self.node(*a).value.data;
                self.send(adj, *a, g.iter().zip(x).map(|(&gg, &x)| two * x * gg).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.node(*a).value.data;
                let d = g.iter().zip(x).map(|(&gg, &x)| if x >= *lo && x <= *hi { gg } else { T::zero() }).collect();
                self.send(adj, *a, d);
            }
            Op::SumRows(a) => {
                let ac = self.shape(*a)[1];
                let mut d = Vec::with_capacity(r * ac);
                for gg in &g {
                    d.extend(std::iter::repeat_n(*gg, ac));
                }
                self.send(adj, *a, d);
            }
            Op::SumAll(a) => {
                let n = self.node(*a).value.data.len();
                self.send(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.node(*a).value.data.len();
                self.send(adj, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(r * pc);
                        for row in 0..r {
                            d.extend_from_slice(&g[row * c + off..row * c + off + pc]);
                        }
                        self.send(adj, *p, d);
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a)[1];
                let mut d = vec![T::zero(); r * ac];
                for row in 0..r {
                    d[row * ac + start..row * ac + start + c].copy_from_slice(&g[row * c..(row + 1) * c]);
                }
                self.send(adj, *a, d);
            }
            Op::Gather(a, index) => {
                let n = self.node(*a).value.data.len();
                let mut d = vec![T::zero(); n];
                for (gg, &ix) in g.iter().zip(index) {
                    d[ix] = d[ix] + *gg;
                }
                self.send(adj, *a, d);
            }
            Op::Reshape(a) => self.send(adj, *a, g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn elu_forward_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(1, 3, vec![0.0, 2.0, -1.0]);
        let y = g.elu(x);
        let v = &g.value(y).data;
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.0);
        assert!(close(v[2], -0.632121, 1e-6));
    }

    #[test]
    fn square_grad_power_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn elu_grad_negative_branch() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![-1.0]);
        let y = g.elu(x);
        g.backward(y).unwrap();
        assert!(close(g.grad(x).unwrap()[0], 0.367879, 1e-6));
    }

    #[test]
    fn constant_leaf_has_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![2.0]);
        let c = g.input(1, 1, vec![5.0]);
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 3, vec![1.0, 2.0, 3.0]);
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s).data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_branch() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![5.0]);
        let s = g.stop_gradient(x);
        let y = g.add(x, s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn stop_gradient_blocks_fully() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 1, vec![-1.7]);
        let sq = g.mul(x, x).unwrap();
        let s = g.stop_gradient(sq);
        let y = g.mul_scalar(s, 3.0);
        let z = g.add_scalar(y, 0.0);
        g.backward(z).unwrap();
        assert!(g.grad(x).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 2, vec![1.0, 2.0]);
        let err = g.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(2, 3, vec![0.0; 6]);
        let b = g.input(2, 2, vec![0.0; 4]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(1, 2, vec![0.3, -0.4]);
        let t = g.tanh(x);
        let y = g.sum(t);
        g.backward(y).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(y).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn broadcast_row_bias_gradient_sums_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.input(3, 2, vec![1.0; 6]);
        let b = g.param(1, 2, vec![0.0, 0.0]);
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
    }
}

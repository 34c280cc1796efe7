//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`], so
//! parents always precede children and the node order is a topological
//! order. [`Tape::backward`] consumes the tape: adjoints are accumulated in
//! one reverse sweep and returned per registered parameter.
//!
//! Binary element-wise ops accept equal shapes or a `1 x 1` operand on
//! either side. Row-wise scaling, bias addition and segment sums are
//! explicit ops rather than implicit broadcasting.

mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Real;

use tensor::{column_sums, matmul};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifier of a trainable parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Binary(Bin, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Shift(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SegmentSum(Var, usize),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    ScaleRows(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    CumsumExclusive(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of a computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the registered parameters after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`, or `None` when the output does not depend on it.
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient for `id` with zeros substituted for independence.
    pub fn get_or_zeros(&self, id: ParamId, rows: usize, cols: usize) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    /// Element-wise sum, in order, with another gradient map.
    pub fn merge(&mut self, other: Gradients<T>) {
        if other.grads.len() > self.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            match (slot.as_mut(), g) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *slot = Some(b),
                _ => {}
            }
        }
    }
}

fn shape_err<T>(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<T> {
    Err(Error::Shape { op, lhs, rhs })
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Whether any trainable parameter reaches `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf whose adjoint is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        if sa != sb && sa != (1, 1) && sb != (1, 1) {
            return shape_err(name, sa, sb);
        }
        let f = |x: T, y: T| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let va = self.value(a);
        let vb = self.value(b);
        if kind == Bin::Div && vb.data().iter().any(|&y| y == T::zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        let value = if sa == sb {
            va.zip_map(vb, f)
        } else if sb == (1, 1) {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else {
            let x = va.item();
            vb.map(|y| f(x, y))
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    /// Element-wise quotient; any zero in the divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Unary::Neg => x.map(|v| -v),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Log => {
                if x.data().iter().any(|&v| !(v > T::zero())) {
                    return Err(Error::Domain("log of a non-positive value".into()));
                }
                x.map(|v| v.ln())
            }
            Unary::Sin => x.map(|v| v.sin()),
            Unary::Cos => x.map(|v| v.cos()),
            Unary::Sqrt => {
                if x.data().iter().any(|&v| v < T::zero()) {
                    return Err(Error::Domain("sqrt of a negative value".into()));
                }
                x.map(|v| v.sqrt())
            }
            Unary::Abs => x.map(|v| v.abs()),
            Unary::Relu => x.map(|v| v.max(T::zero())),
            Unary::Softplus => x.map(softplus),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(|v| v.tanh()),
        };
        let ng = self.needs(a);
        Ok(self.push(value, Op::Unary(kind, a), ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Cos, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }
    /// `ln(1 + e^x)` evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        let ng = self.needs(a);
        Ok(self.push(value, Op::Scale(a, factor), ng))
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, offset: T) -> Result<Var> {
        let value = self.value(a).map(|v| v + offset);
        let ng = self.needs(a);
        Ok(self.push(value, Op::Shift(a), ng))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| T::one() - v);
        let ng = self.needs(a);
        // d(1 - a)/da = -1, the same adjoint rule as a scale by -1
        Ok(self.push(value, Op::Scale(a, -T::one()), ng))
    }

    /// `max(a, floor)`; the gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(floor));
        let ng = self.needs(a);
        Ok(self.push(value, Op::ClampMin(a, floor), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        Ok(self.push(value, Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(x.sum() / T::from_count(x.len()));
        let ng = self.needs(a);
        Ok(self.push(value, Op::Mean(a), ng))
    }

    /// Per-row sums, `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        let value = Tensor::from_parts(x.rows(), 1, data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::SumCols(a), ng))
    }

    /// Sums consecutive groups of `group` rows: `(n * group) x c -> n x c`.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if group == 0 || rows % group != 0 {
            return shape_err("segment_sum", (rows, cols), (group, cols));
        }
        let n = rows / group;
        let mut data = vec![T::zero(); n * cols];
        for r in 0..rows {
            let out = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (o, &v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(n, cols, data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::SegmentSum(a, group), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.1 != sb.0 {
            return shape_err("matmul", sa, sb);
        }
        let value = matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x W + b` with `b` a `1 x out` row added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.1 != sw.0 {
            return shape_err("affine", sx, sw);
        }
        if sb != (1, sw.1) {
            return shape_err("affine bias", sw, sb);
        }
        let mut value = matmul(self.value(x), self.value(w));
        let bias = self.value(b).data().to_vec();
        for row in value.data_mut().chunks_mut(sw.1.max(1)) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Affine(x, w, b), ng))
    }

    /// Multiplies each row of `a` by the matching entry of the column `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.value(a).shape(), self.value(s).shape());
        if ss != (sa.0, 1) {
            return shape_err("scale_rows", sa, ss);
        }
        let x = self.value(a);
        let col = self.value(s).data();
        let mut data = x.data().to_vec();
        if sa.1 > 0 {
            for (row, &f) in data.chunks_mut(sa.1).zip(col) {
                for v in row {
                    *v *= f;
                }
            }
        }
        let value = Tensor::from_parts(sa.0, sa.1, data);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(value, Op::ScaleRows(a, s), ng))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Domain("concat of nothing".into()));
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.0 != rows {
                return shape_err("concat", (rows, cols), s);
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(rows, cols, data);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if start > end || end > cols {
            return shape_err("slice_cols", (rows, cols), (start, end));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let value = Tensor::from_parts(rows, end - start, data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.len() != rows * cols {
            return shape_err("reshape", x.shape(), (rows, cols));
        }
        let value = Tensor::from_parts(rows, cols, x.data().to_vec());
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", (rows, cols), (bad, cols));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::from_parts(indices.len(), cols, data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), ng))
    }

    /// Exclusive prefix sum along each row: `y[r, k] = sum_{l < k} x[r, l]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let mut acc = T::zero();
            for c in 0..cols {
                data[r * cols + c] = acc;
                acc += x.get(r, c);
            }
        }
        let value = Tensor::from_parts(rows, cols, data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::CumsumExclusive(a), ng))
    }

    /// Reverse sweep from a scalar output. Consumes the tape.
    pub fn backward(self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::Domain(format!(
                "backward needs a scalar output, got {out_shape:?}"
            )));
        }
        let nodes = self.nodes;
        let mut adj: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        adj.resize_with(nodes.len(), || None);
        adj[output.0] = Some(Tensor::scalar(T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = Vec::new();

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].needs_grad;
            let acc = |v: Var, contrib: Tensor<T>, adj: &mut Vec<Option<Tensor<T>>>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match adj[v.0].as_mut() {
                    Some(existing) => existing.add_assign(&contrib),
                    None => adj[v.0] = Some(contrib),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if param_grads.len() <= id.0 {
                        param_grads.resize(id.0 + 1, None);
                    }
                    match param_grads[id.0].as_mut() {
                        Some(existing) => existing.add_assign(&g),
                        None => param_grads[id.0] = Some(g),
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (ga, gb) = match kind {
                        Bin::Add => (
                            needs(*a).then(|| g.clone()),
                            needs(*b).then(|| g.clone()),
                        ),
                        Bin::Sub => (
                            needs(*a).then(|| g.clone()),
                            needs(*b).then(|| g.map(|x| -x)),
                        ),
                        Bin::Mul => (
                            needs(*a).then(|| bmul(&g, vb)),
                            needs(*b).then(|| bmul(&g, va)),
                        ),
                        Bin::Div => {
                            let inv = vb.map(|y| T::one() / y);
                            let ga = needs(*a).then(|| bmul(&g, &inv));
                            let gb = needs(*b).then(|| {
                                let q = bmul(&node.value, &inv);
                                bmul(&g, &q).map(|x| -x)
                            });
                            (ga, gb)
                        }
                    };
                    if let Some(ga) = ga {
                        acc(*a, reduce_to(ga, va.shape()), &mut adj);
                    }
                    if let Some(gb) = gb {
                        acc(*b, reduce_to(gb, vb.shape()), &mut adj);
                    }
                }
                Op::Unary(kind, a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = match kind {
                        Unary::Neg => g.map(|v| -v),
                        Unary::Exp => g.zip_map(y, |gv, yv| gv * yv),
                        Unary::Log => g.zip_map(x, |gv, xv| gv / xv),
                        Unary::Sin => g.zip_map(x, |gv, xv| gv * xv.cos()),
                        Unary::Cos => g.zip_map(x, |gv, xv| -gv * xv.sin()),
                        Unary::Sqrt => g.zip_map(y, |gv, yv| {
                            if yv > T::zero() {
                                gv / (yv + yv)
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Abs => g.zip_map(x, |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Relu => g.zip_map(x, |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Softplus => g.zip_map(x, |gv, xv| gv * sigmoid(xv)),
                        Unary::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)),
                        Unary::Tanh => g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)),
                    };
                    acc(*a, d, &mut adj);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    acc(*a, g.map(|v| v * f), &mut adj);
                }
                Op::Shift(a) => acc(*a, g, &mut adj),
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    let d = g.zip_map(val(*a), |gv, xv| if xv > floor { gv } else { T::zero() });
                    acc(*a, d, &mut adj);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item()), &mut adj);
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = T::from_count(r * c);
                    acc(*a, Tensor::filled(r, c, g.item() / n), &mut adj);
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    let mut data = Vec::with_capacity(r * c);
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv, c));
                    }
                    acc(*a, Tensor::from_parts(r, c, data), &mut adj);
                }
                Op::SegmentSum(a, group) => {
                    let (r, c) = val(*a).shape();
                    let mut data = Vec::with_capacity(r * c);
                    for row in 0..r {
                        data.extend_from_slice(g.row(row / group));
                    }
                    acc(*a, Tensor::from_parts(r, c, data), &mut adj);
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(*a, matmul(&g, &val(*b).transpose()), &mut adj);
                    }
                    if needs(*b) {
                        acc(*b, matmul(&val(*a).transpose(), &g), &mut adj);
                    }
                }
                Op::Affine(x, w, b) => {
                    if needs(*x) {
                        acc(*x, matmul(&g, &val(*w).transpose()), &mut adj);
                    }
                    if needs(*w) {
                        acc(*w, matmul(&val(*x).transpose(), &g), &mut adj);
                    }
                    if needs(*b) {
                        acc(*b, column_sums(&g), &mut adj);
                    }
                }
                Op::ScaleRows(a, s) => {
                    let x = val(*a);
                    let col = val(*s);
                    let cols = x.cols();
                    if needs(*a) {
                        let mut data = g.data().to_vec();
                        if cols > 0 {
                            for (row, &f) in data.chunks_mut(cols).zip(col.data()) {
                                for v in row {
                                    *v *= f;
                                }
                            }
                        }
                        acc(*a, Tensor::from_parts(x.rows(), cols, data), &mut adj);
                    }
                    if needs(*s) {
                        let data = (0..x.rows())
                            .map(|r| {
                                g.row(r)
                                    .iter()
                                    .zip(x.row(r))
                                    .map(|(&gv, &xv)| gv * xv)
                                    .sum()
                            })
                            .collect();
                        acc(*s, Tensor::from_parts(x.rows(), 1, data), &mut adj);
                    }
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = val(p).cols();
                        if needs(p) {
                            let mut data = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            acc(p, Tensor::from_parts(rows, pc, data), &mut adj);
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let width = g.cols();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        for k in 0..width {
                            d.set(row, start + k, g.get(row, k));
                        }
                    }
                    acc(*a, d, &mut adj);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::from_parts(r, c, g.into_data()), &mut adj);
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        let src = g.row(k);
                        let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    acc(*a, d, &mut adj);
                }
                Op::CumsumExclusive(a) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        let mut tail = T::zero();
                        for col in (0..c).rev() {
                            d.set(row, col, tail);
                            tail += g.get(row, col);
                        }
                    }
                    acc(*a, d, &mut adj);
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse<T: Real>(y: T) -> T {
    y + (-(-y).exp_m1()).ln()
}

fn bmul<T: Real>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if g.shape() == other.shape() {
        g.zip_map(other, |a, b| a * b)
    } else if other.is_scalar() {
        let s = other.item();
        g.map(|a| a * s)
    } else {
        let s = g.item();
        other.map(|b| s * b)
    }
}

fn reduce_to<T: Real>(g: Tensor<T>, shape: (usize, usize)) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

#[cfg(test)]
mod tests;

//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Operations are recorded on a [`Tape`] as they are applied (define-by-run)
//! and evaluated eagerly. The recorded graph can be re-evaluated with new leaf
//! values through [`Tape::forward_eval`], which is how the training loop reuses
//! one unrolled Euler graph across iterations.
//!
//! Every tensor on the tape is a matrix; scalars are `1 x 1`. Elementwise
//! binary operations broadcast any extent equal to one.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Differentiated by [`Tape::backward`].
    Parameter,
    /// Data such as Brownian increments or fixed coefficient matrices.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnOp<T> {
    Tanh,
    Sin,
    Cos,
    Exp,
    Square,
    Neg,
    Scale(T),
    Offset(T),
}

#[derive(Clone, Debug, PartialEq)]
enum Op<T> {
    Leaf(LeafKind),
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp<T>, Var),
    SumAll(Var),
    SumCols(Var),
    SquaredNorm(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    BatchMatVec { mat: Var, vec: Var, out: usize },
    BroadcastRows { src: Var, rows: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    diverged: bool,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for k in 0..2 {
        out[k] = match (a[k], b[k]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b)));
            }
        };
    }
    Ok(out)
}

/// Row and column strides of an operand broadcast to the output shape.
fn strides(shape: &[usize]) -> (usize, usize) {
    (if shape[0] == 1 { 0 } else { shape[1] }, if shape[1] == 1 { 0 } else { 1 })
}

#[inline]
fn bindex(shape: &[usize], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

fn apply_unary<T: Real>(op: UnOp<T>, x: T) -> T {
    match op {
        UnOp::Tanh => x.libm_tanh(),
        UnOp::Sin => x.libm_sin(),
        UnOp::Cos => x.libm_cos(),
        UnOp::Exp => x.libm_exp(),
        UnOp::Square => x * x,
        UnOp::Neg => -x,
        UnOp::Scale(c) => c * x,
        UnOp::Offset(c) => x + c,
    }
}

fn apply_binary<T: Real>(op: BinOp, a: T, b: T) -> T {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), diverged: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when the last evaluated root contained NaN or infinity.
    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, kind: LeafKind, value: Tensor<T>) -> Result<Var> {
        if value.shape().len() != 2 {
            return Err(Error::Shape(format!("tape tensors are matrices, got {:?}", value.shape())));
        }
        Ok(self.push(Op::Leaf(kind), value, kind == LeafKind::Parameter))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(LeafKind::Parameter, value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(LeafKind::Constant, value)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(Op::Leaf(LeafKind::Constant), Tensor::scalar(value), false)
    }

    /// Replaces the value of a leaf; the shape must not change.
    pub fn set_value(&mut self, v: Var, value: &Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf(_)) {
            return Err(Error::Shape(format!("node {} is not a leaf", v.0)));
        }
        node.value.copy_from(value)
    }

    fn op_node(&mut self, op: Op<T>) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires_grad = self.inputs_require_grad(&op);
        Ok(self.push(op, value, requires_grad))
    }

    fn inputs_require_grad(&self, op: &Op<T>) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf(kind) => *kind == LeafKind::Parameter,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => rg(a) || rg(b),
            Op::Unary(_, a) | Op::SumAll(a) | Op::SumCols(a) | Op::SquaredNorm(a) => rg(a),
            Op::Concat(parts) => parts.iter().any(rg),
            Op::Slice { src, .. } | Op::BroadcastRows { src, .. } => rg(src),
            Op::BatchMatVec { mat, vec, .. } => rg(mat) || rg(vec),
        }
    }

    fn compute(&self, op: &Op<T>) -> Result<Tensor<T>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf(_) => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.cols() != b.rows() {
                    return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
                }
                let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
                gemm(a.data(), a.rows(), a.cols(), false, b.data(), b.rows(), b.cols(), false, out.data_mut(), false);
                Ok(out)
            }
            Op::Binary(bop, a, b) => {
                let (a, b) = (val(a), val(b));
                let shape = broadcast_shape(a.shape(), b.shape())?;
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| apply_binary(*bop, x, y)).collect();
                    return Tensor::from_vec(&shape, data);
                }
                let mut out = Tensor::zeros(&shape);
                let (ad, bd) = (a.data(), b.data());
                let od = out.data_mut();
                for r in 0..shape[0] {
                    for c in 0..shape[1] {
                        od[r * shape[1] + c] =
                            apply_binary(*bop, ad[bindex(a.shape(), r, c)], bd[bindex(b.shape(), r, c)]);
                    }
                }
                Ok(out)
            }
            Op::Unary(uop, a) => Ok(val(a).map(|x| apply_unary(*uop, x))),
            Op::SumAll(a) => Ok(Tensor::scalar(val(a).data().iter().copied().sum())),
            Op::SumCols(a) => {
                let a = val(a);
                let data = (0..a.rows()).map(|r| a.row_slice(r).iter().copied().sum()).collect();
                Tensor::from_vec(&[a.rows(), 1], data)
            }
            Op::SquaredNorm(a) => Ok(Tensor::scalar(val(a).data().iter().map(|&x| x * x).sum())),
            Op::Concat(parts) => {
                let rows = val(&parts[0]).rows();
                let mut cols = 0;
                for p in parts {
                    if val(p).rows() != rows {
                        return Err(Error::Shape(format!("concat row counts differ: {} vs {}", rows, val(p).rows())));
                    }
                    cols += val(p).cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(val(p).row_slice(r));
                    }
                }
                Tensor::from_vec(&[rows, cols], data)
            }
            Op::Slice { src, start, len } => {
                let s = val(src);
                if start + len > s.cols() {
                    return Err(Error::Shape(format!("column slice {}..{} of {:?}", start, start + len, s.shape())));
                }
                let mut data = Vec::with_capacity(s.rows() * len);
                for r in 0..s.rows() {
                    data.extend_from_slice(&s.row_slice(r)[*start..start + len]);
                }
                Tensor::from_vec(&[s.rows(), *len], data)
            }
            Op::BatchMatVec { mat, vec, out } => {
                let (m, v) = (val(mat), val(vec));
                let inner = v.cols();
                if m.rows() != v.rows() || m.cols() != out * inner {
                    return Err(Error::Shape(format!(
                        "batched mat-vec {:?} by {:?} into {} outputs",
                        m.shape(),
                        v.shape(),
                        out
                    )));
                }
                let mut res = Tensor::zeros(&[m.rows(), *out]);
                let rd = res.data_mut();
                for r in 0..m.rows() {
                    let mr = m.row_slice(r);
                    let vr = v.row_slice(r);
                    for k in 0..*out {
                        rd[r * out + k] = mr[k * inner..(k + 1) * inner].iter().zip(vr).map(|(&a, &b)| a * b).sum();
                    }
                }
                Ok(res)
            }
            Op::BroadcastRows { src, rows } => {
                let s = val(src);
                if s.rows() != 1 {
                    return Err(Error::Shape(format!("row broadcast of {:?}", s.shape())));
                }
                let mut data = Vec::with_capacity(rows * s.cols());
                for _ in 0..*rows {
                    data.extend_from_slice(s.data());
                }
                Tensor::from_vec(&[*rows, s.cols()], data)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_node(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_node(Op::Binary(BinOp::Add, a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_node(Op::Binary(BinOp::Sub, a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_node(Op::Binary(BinOp::Mul, a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op_node(Op::Binary(BinOp::Div, a, b))
    }

    fn unary(&mut self, op: UnOp<T>, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| apply_unary(op, x));
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Unary(op, a), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnOp::Tanh, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnOp::Cos, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnOp::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnOp::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnOp::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(UnOp::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(UnOp::Offset(c), a)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        self.op_node(Op::SumAll(a)).expect("sum of any matrix is defined")
    }

    /// Per-row sums: `r x c` to `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.op_node(Op::SumCols(a)).expect("row sums of any matrix are defined")
    }

    /// Squared Frobenius norm, as a `1 x 1` tensor.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        self.op_node(Op::SquaredNorm(a)).expect("norm of any matrix is defined")
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        self.op_node(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.op_node(Op::Slice { src, start, len })
    }

    /// Row-wise matrix-vector product. Row `r` of `mat` holds an `out x k`
    /// matrix in row-major order, row `r` of `vec` a `k`-vector.
    pub fn batch_matvec(&mut self, mat: Var, vec: Var, out: usize) -> Result<Var> {
        self.op_node(Op::BatchMatVec { mat, vec, out })
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, src: Var, rows: usize) -> Result<Var> {
        self.op_node(Op::BroadcastRows { src, rows })
    }

    /// Sets the given leaves, re-evaluates every recorded operation in order
    /// and returns the value of `root`. A non-finite root raises the
    /// divergence flag instead of failing.
    pub fn forward_eval(&mut self, inputs: &[(Var, &Tensor<T>)], root: Var) -> Result<&Tensor<T>> {
        for (v, t) in inputs {
            self.set_value(*v, t)?;
        }
        self.replay()?;
        self.diverged = !self.nodes[root.0].value.all_finite();
        Ok(&self.nodes[root.0].value)
    }

    /// Re-evaluates all non-leaf nodes from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op)?;
            if value.shape() != self.nodes[i].value.shape() {
                return Err(Error::Shape(format!(
                    "node {} changed shape from {:?} to {:?} on replay",
                    i,
                    self.nodes[i].value.shape(),
                    value.shape()
                )));
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Marks divergence from an explicit check, e.g. a state bound.
    pub fn flag_diverged(&mut self) {
        self.diverged = true;
    }

    /// Reverse sweep from a `1 x 1` root. Afterwards [`Tape::grad`] returns
    /// the adjoint of every node that depends on a parameter.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        self.diverged = !self.nodes[root.0].value.all_finite();
        self.grads.resize(self.nodes.len(), None);
        for t in self.grads.iter_mut().flatten() {
            t.fill(T::zero());
        }
        self.grads[root.0] = Some(Tensor::scalar(T::one()));
        let mut touched = vec![false; self.nodes.len()];
        touched[root.0] = true;
        for i in (0..=root.0).rev() {
            if !touched[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut touched);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn adjoint_slot<'a>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>, touched: &mut [bool]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let op = &nodes[i].op;
        let out = &nodes[i].value;
        let mut mark = |v: &Var| touched[v.0] = true;
        match op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                mark(a);
                mark(b);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = Self::adjoint_slot(grads, nodes, *a) {
                    gemm(
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        true,
                        ga.data_mut(),
                        true,
                    );
                }
                if let Some(gb) = Self::adjoint_slot(grads, nodes, *b) {
                    gemm(
                        av.data(),
                        av.rows(),
                        av.cols(),
                        true,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                        gb.data_mut(),
                        true,
                    );
                }
            }
            Op::Binary(bop, a, b) => {
                mark(a);
                mark(b);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (strides(av.shape()), strides(bv.shape()));
                let (rows, cols) = (out.rows(), out.cols());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                // Visits every output entry with its operand indices.
                let each = |f: &mut dyn FnMut(usize, usize, T)| {
                    for r in 0..rows {
                        for c in 0..cols {
                            f(r * sa.0 + c * sa.1, r * sb.0 + c * sb.1, gd[r * cols + c]);
                        }
                    }
                };
                if let Some(ga) = Self::adjoint_slot(grads, nodes, *a) {
                    let dst = ga.data_mut();
                    match bop {
                        BinOp::Add | BinOp::Sub => each(&mut |ia, _, gk| dst[ia] += gk),
                        BinOp::Mul => each(&mut |ia, ib, gk| dst[ia] += gk * bd[ib]),
                        BinOp::Div => each(&mut |ia, ib, gk| dst[ia] += gk / bd[ib]),
                    }
                }
                if let Some(gb) = Self::adjoint_slot(grads, nodes, *b) {
                    let dst = gb.data_mut();
                    match bop {
                        BinOp::Add => each(&mut |_, ib, gk| dst[ib] += gk),
                        BinOp::Sub => each(&mut |_, ib, gk| dst[ib] -= gk),
                        BinOp::Mul => each(&mut |ia, ib, gk| dst[ib] += gk * ad[ia]),
                        BinOp::Div => each(&mut |ia, ib, gk| dst[ib] -= gk * ad[ia] / (bd[ib] * bd[ib])),
                    }
                }
            }
            Op::Unary(uop, a) => {
                mark(a);
                let x = &nodes[a.0].value;
                if let Some(ga) = Self::adjoint_slot(grads, nodes, *a) {
                    let two = T::one() + T::one();
                    for ((gd, &gk), (&xv, &yv)) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(x.data().iter().zip(out.data()))
                    {
                        *gd += match uop {
                            UnOp::Tanh => gk * (T::one() - yv * yv),
                            UnOp::Sin => gk * xv.libm_cos(),
                            UnOp::Cos => -gk * xv.libm_sin(),
                            UnOp::Exp => gk * yv,
                            UnOp::Square => two * xv * gk,
                            UnOp::Neg => -gk,
                            UnOp::Scale(c) => *c * gk,
                            UnOp::Offset(_) => gk,
                        };
                    }
                }
            }
            Op::SumAll(a) => {
                mark(a);
                if let Some(ga) = Self::adjoint_slot(grads, nodes, *a) {
                    let gk = g.item();
                    ga.data_mut().iter_mut().for_each(|v| *v += gk);
                }
            }
            Op::SumCols(a) => {
                mark(a);
                if let Some(ga) = Self::adjoint_slot(grads, nodes, *a) {
                    let cols = ga.cols();
                    for (r, chunk) in ga.data_mut().chunks_mut(cols).enumerate() {
                        let gk = g.data()[r];
                        chunk.iter_mut().for_each(|v| *v += gk);
                    }
                }
            }
            Op::SquaredNorm(a) => {
                mark(a);
                let x = &nodes[a.0].value;
                if let Some(ga) = Self::adjoint_slot(grads, nodes, *a) {
                    let two_g = (T::one() + T::one()) * g.item();
                    for (gd, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gd += two_g * xv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let cols = out.cols();
                for p in parts {
                    mark(p);
                    let pc = nodes[p.0].value.cols();
                    if let Some(gp) = Self::adjoint_slot(grads, nodes, *p) {
                        for (r, chunk) in gp.data_mut().chunks_mut(pc).enumerate() {
                            let src = &g.data()[r * cols + offset..r * cols + offset + pc];
                            chunk.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += pc;
                }
            }
            Op::Slice { src, start, len } => {
                mark(src);
                if let Some(gs) = Self::adjoint_slot(grads, nodes, *src) {
                    let cols = gs.cols();
                    for (r, chunk) in gs.data_mut().chunks_mut(cols).enumerate() {
                        let gr = &g.data()[r * len..(r + 1) * len];
                        chunk[*start..start + len].iter_mut().zip(gr).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::BatchMatVec { mat, vec, out: k_out } => {
                mark(mat);
                mark(vec);
                let (mv, vv) = (&nodes[mat.0].value, &nodes[vec.0].value);
                let inner = vv.cols();
                if let Some(gm) = Self::adjoint_slot(grads, nodes, *mat) {
                    let mc = gm.cols();
                    let gmd = gm.data_mut();
                    for r in 0..mv.rows() {
                        let vr = vv.row_slice(r);
                        for k in 0..*k_out {
                            let gk = g.data()[r * k_out + k];
                            let row = &mut gmd[r * mc + k * inner..r * mc + (k + 1) * inner];
                            row.iter_mut().zip(vr).for_each(|(d, &x)| *d += gk * x);
                        }
                    }
                }
                if let Some(gv) = Self::adjoint_slot(grads, nodes, *vec) {
                    let gvd = gv.data_mut();
                    for r in 0..mv.rows() {
                        let mr = mv.row_slice(r);
                        let dst = &mut gvd[r * inner..(r + 1) * inner];
                        for k in 0..*k_out {
                            let gk = g.data()[r * k_out + k];
                            dst.iter_mut().zip(&mr[k * inner..(k + 1) * inner]).for_each(|(d, &m)| *d += gk * m);
                        }
                    }
                }
            }
            Op::BroadcastRows { src, rows } => {
                mark(src);
                if let Some(gs) = Self::adjoint_slot(grads, nodes, *src) {
                    let cols = gs.cols();
                    let gd = gs.data_mut();
                    for r in 0..*rows {
                        gd.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        }
    }

    /// Adjoint of `v` from the last backward pass, if `v` depends on a
    /// parameter and received any gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoints of the given leaves, zero where no gradient reached them.
    pub fn gradients(&self, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter().map(|&v| self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))).collect()
    }
}

impl Tape<f64> {
    /// Compares the reverse-mode gradient of `root` with central differences
    /// of step `eps` for every entry of every listed parameter, returning the
    /// largest `|ad - fd| / (|fd| + eps)`.
    pub fn finite_diff_check(&mut self, params: &[Var], root: Var, eps: f64) -> Result<f64> {
        self.replay()?;
        self.backward(root)?;
        let ad = self.gradients(params);
        let mut worst = 0.0f64;
        for (p, g) in params.iter().zip(&ad) {
            let base = self.value(*p).clone();
            let mut probe = base.clone();
            for k in 0..base.len() {
                probe.data_mut()[k] = base.data()[k] + eps;
                let up = self.forward_eval(&[(*p, &probe)], root)?.item();
                probe.data_mut()[k] = base.data()[k] - eps;
                let down = self.forward_eval(&[(*p, &probe)], root)?.item();
                probe.data_mut()[k] = base.data()[k];
                let fd = (up - down) / (2.0 * eps);
                let rel = (g.data()[k] - fd).abs() / (fd.abs() + eps);
                worst = worst.max(rel);
            }
            self.set_value(*p, &base)?;
        }
        self.replay()?;
        Ok(worst)
    }
}

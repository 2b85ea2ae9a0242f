// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! only ever appended, so an op's inputs always precede it and a single
//! reverse sweep from the seed visits everything in topological order.
//! All reductions iterate in index order, so results are bitwise
//! reproducible.

use std::cell::RefCell;
use std::sync::Arc;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    TransposeLast(usize),
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<F> },
    Gelu(usize),
    Sigmoid(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Sum(usize),
    Mean(usize),
    SquaredNorm(usize),
    Identity(usize),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::TransposeLast(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Embedding { .. } => "embedding",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SquaredNorm(..) => "squared_norm",
            Op::Identity(..) => "identity",
        }
    }
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of executed primitives.
pub struct Tape<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    checked: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// dSeed/dVar, or `None` when `var` does not influence the seed.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but substitutes zeros of the right shape.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> Tensor<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape().as_slice()),
        }
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            checked: false,
        }
    }

    /// A tape that rejects NaN/Inf at every op boundary.
    pub fn checked() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&self, value: Tensor<F>) -> Result<Var<'_, F>> {
        self.leaf_arc(Arc::new(value), false)
    }

    /// Differentiable input.
    pub fn param(&self, value: Tensor<F>) -> Result<Var<'_, F>> {
        self.leaf_arc(Arc::new(value), true)
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<F>>, requires_grad: bool) -> Result<Var<'_, F>> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Result<Var<'_, F>> {
        self.push_with(value, op, false)
    }

    fn push_with(&self, value: Tensor<F>, op: Op<F>, force_grad: bool) -> Result<Var<'_, F>> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = force_grad || inputs_of(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Row lookup: `ids` index rows of the 2-D `table`; the result has
    /// shape `shape ++ [table_cols]`.
    pub fn embedding<'t>(
        &'t self,
        table: Var<'t, F>,
        ids: &[usize],
        shape: &[usize],
    ) -> Result<Var<'t, F>> {
        self.same_tape(table)?;
        let t = self.value_of(table.id);
        if t.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let numel: usize = shape.iter().product();
        if numel != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: vec![ids.len()],
                rhs: shape.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::ShapeMismatch {
                    op: "embedding",
                    lhs: t.shape().to_vec(),
                    rhs: vec![id],
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(cols);
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let values: Vec<_> = xs
            .iter()
            .map(|v| self.same_tape(*v).map(|_| self.value_of(v.id)))
            .collect::<Result<_>>()?;
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
        )
    }

    fn same_tape(&self, v: Var<'_, F>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::ForeignSeed)
        }
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var<'_, F>) -> Result<Gradients<F>> {
        self.same_tape(seed)?;
        let nodes = self.nodes.borrow();
        let seed_value = &nodes[seed.id].value;
        if seed_value.numel() != 1 {
            return Err(Error::NonScalarSeed(seed_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[seed.id] = Some(Tensor::full(seed_value.shape(), F::one()));

        for id in (0..=seed.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let Some(g) = rest[0].as_ref() else {
                continue;
            };
            propagate(&nodes, node, g, before)?;
        }
        // Drop gradients of nodes that never asked for them.
        for (slot, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn inputs_of<F>(op: &Op<F>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBroadcast(a, b)
        | Op::MulBroadcast(a, b)
        | Op::MatMul(a, b)
        | Op::BatchMatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::TransposeLast(a)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SquaredNorm(a)
        | Op::Identity(a) => vec![*a],
        Op::LayerNorm { x, .. } | Op::Slice { x, .. } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::Concat { xs, .. } => xs.clone(),
    }
}

fn accumulate<F: Float>(slot: &mut Option<Tensor<F>>, shape: &[usize], f: impl FnOnce(&mut [F])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn propagate<F: Float>(
    nodes: &[Node<F>],
    node: &Node<F>,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) -> Result<()> {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| -> &Tensor<F> { &nodes[i].value };
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(node.op, Op::Sub(..));
            if needs(*a) {
                accumulate(&mut grads[*a], val(*a).shape(), |d| add_into(d, gd));
            }
            if needs(*b) {
                accumulate(&mut grads[*b], val(*b).shape(), |d| {
                    if negate {
                        d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y);
                    } else {
                        add_into(d, gd);
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                accumulate(&mut grads[*a], val(*a).shape(), |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], val(*b).shape(), |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
        }
        Op::AddBroadcast(a, b) => {
            let nb = val(*b).numel();
            if needs(*a) {
                accumulate(&mut grads[*a], val(*a).shape(), |d| add_into(d, gd));
            }
            if needs(*b) {
                accumulate(&mut grads[*b], val(*b).shape(), |d| {
                    for (i, &x) in gd.iter().enumerate() {
                        d[i % nb] += x;
                    }
                });
            }
        }
        Op::MulBroadcast(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let nb = bv.len();
            if needs(*a) {
                accumulate(&mut grads[*a], val(*a).shape(), |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i % nb];
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], val(*b).shape(), |d| {
                    for (i, &x) in gd.iter().enumerate() {
                        d[i % nb] += x * av[i];
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * *c);
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let k = av.last_dim();
            let n = bv.shape()[1];
            let m = av.numel() / k;
            if needs(*a) {
                // dA = dC · Bᵀ
                accumulate(&mut grads[*a], av.shape(), |d| {
                    matmul_nt(gd, bv.data(), d, m, n, k);
                });
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                accumulate(&mut grads[*b], bv.shape(), |d| {
                    matmul_tn(av.data(), gd, d, m, k, n);
                });
            }
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let nd = av.ndim();
            let (m, k, n) = (av.shape()[nd - 2], av.shape()[nd - 1], bv.shape()[nd - 1]);
            let batches = av.numel() / (m * k);
            if needs(*a) {
                accumulate(&mut grads[*a], av.shape(), |d| {
                    for bi in 0..batches {
                        matmul_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], bv.shape(), |d| {
                    for bi in 0..batches {
                        matmul_tn(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut d[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
        }
        Op::TransposeLast(a) => {
            let av = val(*a);
            let nd = av.ndim();
            let (r, c) = (av.shape()[nd - 2], av.shape()[nd - 1]);
            accumulate(&mut grads[*a], av.shape(), |d| {
                // g has shape [.., c, r]
                for bi in 0..av.numel() / (r * c) {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            d[off + i * c + j] += gd[off + j * r + i];
                        }
                    }
                }
            });
        }
        Op::Reshape(a) | Op::Identity(a) => {
            accumulate(&mut grads[*a], val(*a).shape(), |d| add_into(d, gd));
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let w = node.value.last_dim();
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                for (r, row) in d.chunks_mut(w).enumerate() {
                    let ys = &y[r * w..(r + 1) * w];
                    let gs = &gd[r * w..(r + 1) * w];
                    let dotp = ys
                        .iter()
                        .zip(gs)
                        .fold(F::zero(), |acc, (&p, &q)| acc + p * q);
                    for j in 0..w {
                        row[j] += ys[j] * (gs[j] - dotp);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let w = node.value.last_dim();
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                for (r, row) in d.chunks_mut(w).enumerate() {
                    let ys = &y[r * w..(r + 1) * w];
                    let gs = &gd[r * w..(r + 1) * w];
                    let gsum = gs.iter().fold(F::zero(), |acc, &q| acc + q);
                    for j in 0..w {
                        row[j] += gs[j] - ys[j].exp() * gsum;
                    }
                }
            });
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.data();
            let w = node.value.last_dim();
            let wf = F::of(w as f64);
            accumulate(&mut grads[*x], val(*x).shape(), |d| {
                for (r, row) in d.chunks_mut(w).enumerate() {
                    let ys = &y[r * w..(r + 1) * w];
                    let gs = &gd[r * w..(r + 1) * w];
                    let gmean = gs.iter().fold(F::zero(), |acc, &q| acc + q) / wf;
                    let gy = ys
                        .iter()
                        .zip(gs)
                        .fold(F::zero(), |acc, (&p, &q)| acc + p * q)
                        / wf;
                    for j in 0..w {
                        row[j] += inv_std[r] * (gs[j] - gmean - ys[j] * gy);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let xv = val(*a).data();
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * gelu_grad(xv[i]);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * y[i] * (F::one() - y[i]);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let cols = val(*table).last_dim();
            accumulate(&mut grads[*table], val(*table).shape(), |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(
                        &mut d[id * cols..(id + 1) * cols],
                        &gd[r * cols..(r + 1) * cols],
                    );
                }
            });
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let full = xs[*axis];
            let len = node.value.shape()[*axis];
            accumulate(&mut grads[*x], xs, |d| {
                for o in 0..outer {
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                    add_into(dst, src);
                }
            });
        }
        Op::Concat { xs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &xi in xs {
                let len = val(xi).shape()[*axis];
                if needs(xi) {
                    accumulate(&mut grads[xi], val(xi).shape(), |d| {
                        for o in 0..outer {
                            let src = &gd
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                }
                offset += len;
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            let n = val(*a).numel();
            let scale = if matches!(node.op, Op::Mean(..)) {
                gd[0] / F::of(n as f64)
            } else {
                gd[0]
            };
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                d.iter_mut().for_each(|x| *x += scale);
            });
        }
        Op::SquaredNorm(a) => {
            let xv = val(*a).data();
            let two = F::of(2.0) * gd[0];
            accumulate(&mut grads[*a], val(*a).shape(), |d| {
                for i in 0..d.len() {
                    d[i] += two * xv[i];
                }
            });
        }
    }
    Ok(())
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn matmul_nn<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
fn matmul_nt<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn matmul_tn<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn gelu<F: Float>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + F::of(GELU_COEF) * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    let t = (c * (x + F::of(GELU_COEF) * x * x * x)).tanh();
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0 * GELU_COEF) * x * x)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl<'t, F: Float> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Current forward value.
    pub fn value(&self) -> Arc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary_same(
        self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        self.tape.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, name, f)?;
        self.tape.push(out, op)
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary_same(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary_same(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary_same(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn broadcast(self, other: Var<'t, F>, mul: bool) -> Result<Var<'t, F>> {
        self.tape.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let name = if mul {
            "mul_broadcast"
        } else {
            "add_broadcast"
        };
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let nb = b.numel();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * bd[i % nb] } else { x + bd[i % nb] })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let op = if mul {
            Op::MulBroadcast(self.id, other.id)
        } else {
            Op::AddBroadcast(self.id, other.id)
        };
        self.tape.push(out, op)
    }

    /// `self + other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn add_broadcast(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.broadcast(other, false)
    }

    /// `self * other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn mul_broadcast(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.broadcast(other, true)
    }

    pub fn scale(self, c: F) -> Result<Var<'t, F>> {
        let out = self.value().scale(c);
        self.tape.push(out, Op::Scale(self.id, c))
    }

    /// `[.., m, k] · [k, n] → [.., m, n]`
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.ndim() < 1 || b.ndim() != 2 || a.last_dim() != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let k = a.last_dim();
        let n = b.shape()[1];
        let m = a.numel() / k;
        let mut data = vec![F::zero(); m * n];
        matmul_nn(a.data(), b.data(), &mut data, m, k, n);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("ndim >= 1") = n;
        self.tape
            .push(Tensor::new(shape, data)?, Op::MatMul(self.id, other.id))
    }

    /// `[B.., m, k] · [B.., k, n] → [B.., m, n]`
    pub fn batch_matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.tape.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let nd = a.ndim();
        let ok = nd >= 2
            && b.ndim() == nd
            && a.shape()[..nd - 2] == b.shape()[..nd - 2]
            && a.shape()[nd - 1] == b.shape()[nd - 2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[nd - 2], a.shape()[nd - 1], b.shape()[nd - 1]);
        let batches = a.numel() / (m * k);
        let mut data = vec![F::zero(); batches * m * n];
        for bi in 0..batches {
            matmul_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a.shape().to_vec();
        shape[nd - 1] = n;
        self.tape.push(
            Tensor::new(shape, data)?,
            Op::BatchMatMul(self.id, other.id),
        )
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let nd = a.ndim();
        if nd < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[nd - 2], a.shape()[nd - 1]);
        let mut data = vec![F::zero(); a.numel()];
        let ad = a.data();
        for bi in 0..a.numel() / (r * c) {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = ad[off + i * c + j];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        self.tape
            .push(Tensor::new(shape, data)?, Op::TransposeLast(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let out = softmax_rows(&a, None);
        self.tape.push(out, Op::Softmax(self.id))
    }

    /// Softmax over the last axis of a `[.., s, s]` score tensor where entry
    /// `(i, j)` with `j > i` is excluded (its probability is exactly 0).
    pub fn causal_softmax(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let nd = a.ndim();
        if nd < 2 || a.shape()[nd - 1] != a.shape()[nd - 2] {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let s = a.last_dim();
        let out = softmax_rows(&a, Some(s));
        self.tape.push(out, Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let w = a.last_dim();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row
                .iter()
                .fold(F::zero(), |acc, &x| acc + (x - max).exp())
                .ln()
                + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::LogSoftmax(self.id),
        )
    }

    /// Normalize over the last axis (no affine), epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let w = a.last_dim();
        let wf = F::of(w as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut data = a.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / w.max(1));
        for row in data.chunks_mut(w) {
            let mean = row.iter().fold(F::zero(), |acc, &x| acc + x) / wf;
            let var = row
                .iter()
                .fold(F::zero(), |acc, &x| acc + (x - mean) * (x - mean))
                / wf;
            let inv = F::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::LayerNorm {
                x: self.id,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t, F>> {
        let out = self.value().map(gelu);
        self.tape.push(out, Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, F>> {
        let out = self.value().map(|x| F::one() / (F::one() + (-x).exp()));
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let a = self.value();
        if axis >= a.ndim() || start + len > a.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: a.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let full = a.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &a.data()[(o * full + start) * inner..(o * full + start + len) * inner],
            );
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        )
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let out = Tensor::scalar(a.sum() / F::of(a.numel() as f64));
        self.tape.push(out, Op::Mean(self.id))
    }

    /// Sum of squares of all entries.
    pub fn squared_norm(self) -> Result<Var<'t, F>> {
        let a = self.value();
        let out = Tensor::scalar(a.data().iter().fold(F::zero(), |acc, &x| acc + x * x));
        self.tape.push(out, Op::SquaredNorm(self.id))
    }

    /// A fresh node with the same value; its gradient is the partial
    /// derivative through this particular use only.
    pub fn identity(self) -> Result<Var<'t, F>> {
        let out = (*self.value()).clone();
        self.tape.push(out, Op::Identity(self.id))
    }

    /// Like [`Var::identity`], but the new node always receives a gradient,
    /// even when nothing upstream requires one.
    pub fn watch(self) -> Result<Var<'t, F>> {
        let out = (*self.value()).clone();
        self.tape.push_with(out, Op::Identity(self.id), true)
    }
}

fn softmax_rows<F: Float>(a: &Tensor<F>, causal: Option<usize>) -> Tensor<F> {
    let w = a.last_dim();
    let mut data = a.data().to_vec();
    for (r, row) in data.chunks_mut(w).enumerate() {
        // With a causal mask, row r of each [s, s] block may see columns 0..=r % s.
        let visible = causal.map_or(w, |s| r % s + 1);
        let max = row[..visible]
            .iter()
            .fold(F::neg_infinity(), |m, &x| m.max(x));
        let mut total = F::zero();
        for x in row[..visible].iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row[..visible].iter_mut() {
            *x /= total;
        }
        for x in row[visible..].iter_mut() {
            *x = F::zero();
        }
    }
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[4])).unwrap();
        let y = x.softmax().unwrap().value();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.5)).unwrap();
        let y = x.layer_norm().unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_rule() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(2.0)).unwrap();
        let b = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = a.mul(b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 3.0);
        assert_eq!(g.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape
            .param(Tensor::from_f64(&[5], &[0.3, -1.2, 2.0, 0.0, 0.7]).unwrap())
            .unwrap();
        let y = x.softmax().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        match a.add(b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn checked_tape_rejects_nan() {
        let tape = Tape::<f32>::checked();
        assert!(matches!(
            tape.constant(Tensor::full(&[2], f32::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let x = tape.constant(Tensor::full(&[1], 1e30)).unwrap();
        assert!(matches!(
            x.scale(1e30),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn foreign_seed_is_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let x = t2.param(Tensor::scalar(1.0)).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(matches!(t1.backward(y), Err(Error::ForeignSeed)));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarSeed(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let y = x.causal_softmax().unwrap().value();
        assert_eq!(
            y.data(),
            &[
                1.0,
                0.0,
                0.0,
                0.5,
                0.5,
                0.0,
                1.0 / 3.0,
                1.0 / 3.0,
                1.0 / 3.0
            ]
        );
    }
}

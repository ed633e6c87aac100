//! Reverse-mode autodiff on a Wengert tape.
//!
//! Ops are recorded in forward order into an arena of nodes; the backward
//! pass replays them in reverse, accumulating vector-Jacobian products.
//! First-order only. A tape is single-threaded; independent tapes never
//! share nodes.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// (r×k) · (k×c)
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product, same shape.
    Mul(usize, usize),
    /// (r×c) + (c) broadcast over rows.
    AddRow(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Dot(usize, usize),
    /// Stack matrices with equal column count (vectors concatenate).
    ConcatRows(Vec<usize>),
    Reshape(usize),
    /// Softmax over the last axis.
    Softmax(usize),
    /// Log-softmax over the last axis, via log-sum-exp.
    LogSoftmax(usize),
    /// (r×c) → (r)
    LogSumExpRows(usize),
    /// (r×c) → (r)
    RowSum(usize),
    /// (n) → (n×n) diagonal matrix.
    DiagEmbed(usize),
    /// out[r] = a[r, idx[r]]
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only recording of a differentiable computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one tape node.
#[derive(Debug, Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Leaf that participates in gradients.
    pub fn param(&self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf treated as a constant (no gradient is computed for it).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite tape value from {:?}", op);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.clone(), id }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Gradients produced by one backward pass, keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, var: &Var) -> Tensor {
        assert!(
            self.tape.same_tape(&var.tape),
            "gradient lookup across tapes"
        );
        let shape = var.shape();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(&var.shape()),
        }
    }

    /// Whether any gradient flowed to `var`.
    pub fn reached(&self, var: &Var) -> bool {
        self.grads[var.id].is_some()
    }
}

macro_rules! check_same_tape {
    ($op:expr, $a:expr, $b:expr) => {
        if !$a.tape.same_tape(&$b.tape) {
            return Err(Error::TapeMismatch { op: $op });
        }
    };
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        self.tape.push(value, op, self.needs_grad())
    }

    fn binary(&self, other: &Var, value: Tensor, op: Op) -> Var {
        self.tape
            .push(value, op, self.needs_grad() || other.needs_grad())
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        check_same_tape!("matmul", self, rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (r, k, c) = (a.rows(), a.cols(), b.cols());
        let out = Tensor::matrix(r, c, kernels::matmul(a.data(), b.data(), r, k, c));
        Ok(self.binary(rhs, out, Op::Matmul(self.id, rhs.id)))
    }

    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "a matrix",
                got: a.shape().to_vec(),
            });
        }
        let out = Tensor::matrix(
            a.cols(),
            a.rows(),
            kernels::transpose(a.data(), a.rows(), a.cols()),
        );
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        check_same_tape!("add", self, rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        Ok(self.binary(rhs, out, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        check_same_tape!("sub", self, rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        Ok(self.binary(rhs, out, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        check_same_tape!("mul", self, rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        Ok(self.binary(rhs, out, Op::Mul(self.id, rhs.id)))
    }

    /// Broadcast-add a length-c bias to every row of an (r×c) matrix.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        check_same_tape!("add_row", self, bias);
        let (a, b) = (self.value(), bias.value());
        if a.shape().len() != 2 || b.shape().len() != 1 || a.cols() != b.len() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = Tensor::matrix(
            a.rows(),
            a.cols(),
            kernels::add_row(a.data(), b.data(), a.rows(), a.cols()),
        );
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    pub fn relu(&self) -> Var {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), kernels::relu(a.data()));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v.exp()).collect());
        self.unary(out, Op::Exp(self.id))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&self) -> Var {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v.ln()).collect());
        self.unary(out, Op::Log(self.id))
    }

    pub fn scale(&self, k: f64) -> Var {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * k).collect());
        self.unary(out, Op::Scale(self.id, k))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v + k).collect());
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn abs(&self) -> Var {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v.abs()).collect());
        self.unary(out, Op::Abs(self.id))
    }

    pub fn square(&self) -> Var {
        self.mul(self).expect("square is shape-safe")
    }

    pub fn sum(&self) -> Var {
        let a = self.value();
        self.unary(Tensor::scalar(a.data().iter().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var {
        let a = self.value();
        assert!(!a.is_empty(), "mean of empty tensor");
        let m = a.data().iter().sum::<f64>() / a.len() as f64;
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    pub fn dot(&self, rhs: &Var) -> Result<Var> {
        check_same_tape!("dot", self, rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        Ok(self.binary(rhs, Tensor::scalar(v), Op::Dot(self.id, rhs.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "a shape with matching element count",
                got: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), a.data().to_vec());
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn softmax(&self) -> Var {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let out = Tensor::new(a.shape().to_vec(), kernels::softmax_rows(a.data(), r, c));
        self.unary(out, Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let out = Tensor::new(a.shape().to_vec(), kernels::log_softmax_rows(a.data(), r, c));
        self.unary(out, Op::LogSoftmax(self.id))
    }

    pub fn logsumexp_rows(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "logsumexp_rows",
                expected: "a matrix",
                got: a.shape().to_vec(),
            });
        }
        let out = Tensor::vector(kernels::logsumexp_rows(a.data(), a.rows(), a.cols()));
        Ok(self.unary(out, Op::LogSumExpRows(self.id)))
    }

    pub fn row_sum(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "row_sum",
                expected: "a matrix",
                got: a.shape().to_vec(),
            });
        }
        let out = Tensor::vector(
            (0..a.rows())
                .map(|r| a.row(r).iter().sum::<f64>())
                .collect(),
        );
        Ok(self.unary(out, Op::RowSum(self.id)))
    }

    pub fn diag_embed(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 1 {
            return Err(Error::BadShape {
                op: "diag_embed",
                expected: "a vector",
                got: a.shape().to_vec(),
            });
        }
        let n = a.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in a.data().iter().enumerate() {
            data[i * n + i] = *v;
        }
        Ok(self.unary(Tensor::matrix(n, n, data), Op::DiagEmbed(self.id)))
    }

    /// out[r] = self[r, indices[r]]
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 || indices.len() != a.rows() {
            return Err(Error::BadShape {
                op: "gather_rows",
                expected: "a matrix with one index per row",
                got: a.shape().to_vec(),
            });
        }
        let cols = a.cols();
        for &idx in indices {
            if idx >= cols {
                return Err(Error::ClassOutOfRange { index: idx, classes: cols });
            }
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| a.row(r)[i])
            .collect();
        Ok(self.unary(Tensor::vector(data), Op::GatherRows(self.id, indices.to_vec())))
    }

    /// Backward pass from a scalar node; yields gradients for every
    /// reachable gradient-bearing leaf.
    pub fn backward(&self) -> Result<Gradients> {
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        if !nodes[self.id].value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: nodes[self.id].value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }

        Ok(Gradients { tape: self.tape.clone(), grads })
    }
}

/// Concatenate vars. All-vector inputs join into one longer vector;
/// matrices (and vectors treated as single rows) stack along rows and must
/// agree on column count.
pub fn concat_rows(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
    for p in parts {
        check_same_tape!("concat_rows", first, p);
    }
    let all_vectors = parts.iter().all(|p| p.shape().len() == 1);
    let mut data = Vec::new();
    let value = if all_vectors {
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        Tensor::vector(data)
    } else {
        let mut cols = None;
        let mut total_rows = 0;
        for p in parts {
            let v = p.value();
            let (r, c) = match v.shape().len() {
                1 => (1, v.len()),
                2 => (v.rows(), v.cols()),
                _ => {
                    return Err(Error::BadShape {
                        op: "concat_rows",
                        expected: "vectors or matrices",
                        got: v.shape().to_vec(),
                    })
                }
            };
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![c0],
                        rhs: vec![c],
                    })
                }
                _ => {}
            }
            total_rows += r;
            data.extend_from_slice(v.data());
        }
        Tensor::matrix(total_rows, cols.unwrap(), data)
    };
    let needs = parts.iter().any(|p| p.needs_grad());
    Ok(first
        .tape
        .push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, add: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id].value.len()]);
    }
    add(slot.as_mut().unwrap());
}

#[allow(clippy::too_many_lines)]
fn backward_op(nodes: &[Node], grads: &mut Vec<Option<Vec<f64>>>, id: usize, g: &[f64]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (r, k, c) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].needs_grad {
                // dA = G · Bᵀ
                let bt = kernels::transpose(bv.data(), k, c);
                accumulate(grads, nodes, *a, |dst| {
                    kernels::matmul_acc(g, &bt, dst, r, c, k);
                });
            }
            if nodes[*b].needs_grad {
                // dB = Aᵀ · G
                let at = kernels::transpose(av.data(), r, k);
                accumulate(grads, nodes, *b, |dst| {
                    kernels::matmul_acc(&at, g, dst, k, r, c);
                });
            }
        }
        Op::Transpose(a) => {
            let v = &nodes[id].value;
            let gt = kernels::transpose(g, v.rows(), v.cols());
            accumulate(grads, nodes, *a, |dst| {
                for (d, x) in dst.iter_mut().zip(&gt) {
                    *d += x;
                }
            });
        }
        Op::Add(a, b) => {
            for src in [*a, *b] {
                accumulate(grads, nodes, src, |dst| {
                    for (d, x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                });
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |dst| {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            });
            accumulate(grads, nodes, *b, |dst| {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d -= x;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data().to_vec(), nodes[*b].value.data().to_vec());
            accumulate(grads, nodes, *a, |dst| {
                for ((d, x), y) in dst.iter_mut().zip(g).zip(&bv) {
                    *d += x * y;
                }
            });
            accumulate(grads, nodes, *b, |dst| {
                for ((d, x), y) in dst.iter_mut().zip(g).zip(&av) {
                    *d += x * y;
                }
            });
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, *a, |dst| {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            });
            let cols = nodes[*bias].value.len();
            accumulate(grads, nodes, *bias, |dst| {
                for (i, x) in g.iter().enumerate() {
                    dst[i % cols] += x;
                }
            });
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data().to_vec();
            accumulate(grads, nodes, *a, |dst| {
                for ((d, x), v) in dst.iter_mut().zip(g).zip(&av) {
                    if *v > 0.0 {
                        *d += x;
                    }
                }
            });
        }
        Op::Exp(a) => {
            let out = nodes[id].value.data().to_vec();
            accumulate(grads, nodes, *a, |dst| {
                for ((d, x), o) in dst.iter_mut().zip(g).zip(&out) {
                    *d += x * o;
                }
            });
        }
        Op::Log(a) => {
            let av = nodes[*a].value.data().to_vec();
            accumulate(grads, nodes, *a, |dst| {
                for ((d, x), v) in dst.iter_mut().zip(g).zip(&av) {
                    *d += x / v;
                }
            });
        }
        Op::Scale(a, k) => {
            let k = *k;
            accumulate(grads, nodes, *a, |dst| {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x * k;
                }
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(grads, nodes, *a, |dst| {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            });
        }
        Op::Abs(a) => {
            let av = nodes[*a].value.data().to_vec();
            accumulate(grads, nodes, *a, |dst| {
                for ((d, x), v) in dst.iter_mut().zip(g).zip(&av) {
                    // subgradient 0 at the kink
                    *d += x * if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            });
        }
        Op::Sum(a) => {
            let gv = g[0];
            accumulate(grads, nodes, *a, |dst| {
                for d in dst.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            let gv = g[0] / n;
            accumulate(grads, nodes, *a, |dst| {
                for d in dst.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::Dot(a, b) => {
            let gv = g[0];
            let (av, bv) = (nodes[*a].value.data().to_vec(), nodes[*b].value.data().to_vec());
            accumulate(grads, nodes, *a, |dst| {
                for (d, y) in dst.iter_mut().zip(&bv) {
                    *d += gv * y;
                }
            });
            accumulate(grads, nodes, *b, |dst| {
                for (d, x) in dst.iter_mut().zip(&av) {
                    *d += gv * x;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                let slice = &g[offset..offset + n];
                accumulate(grads, nodes, p, |dst| {
                    for (d, x) in dst.iter_mut().zip(slice) {
                        *d += x;
                    }
                });
                offset += n;
            }
        }
        Op::Softmax(a) => {
            let p = &nodes[id].value;
            let (r, c) = (p.rows(), p.cols());
            accumulate(grads, nodes, *a, |dst| {
                for row in 0..r {
                    let pr = &p.data()[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let inner: f64 = pr.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                    for ((d, pv), gv) in dst[row * c..(row + 1) * c].iter_mut().zip(pr).zip(gr) {
                        *d += pv * (gv - inner);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let out = &nodes[id].value;
            let (r, c) = (out.rows(), out.cols());
            accumulate(grads, nodes, *a, |dst| {
                for row in 0..r {
                    let lr = &out.data()[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for ((d, l), gv) in dst[row * c..(row + 1) * c].iter_mut().zip(lr).zip(gr) {
                        *d += gv - l.exp() * gsum;
                    }
                }
            });
        }
        Op::LogSumExpRows(a) => {
            let av = &nodes[*a].value;
            let (r, c) = (av.rows(), av.cols());
            let p = kernels::softmax_rows(av.data(), r, c);
            accumulate(grads, nodes, *a, |dst| {
                for row in 0..r {
                    let gv = g[row];
                    for (d, pv) in dst[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(&p[row * c..(row + 1) * c])
                    {
                        *d += gv * pv;
                    }
                }
            });
        }
        Op::RowSum(a) => {
            let c = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |dst| {
                for (row, gv) in g.iter().enumerate() {
                    for d in dst[row * c..(row + 1) * c].iter_mut() {
                        *d += gv;
                    }
                }
            });
        }
        Op::DiagEmbed(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i * n + i];
                }
            });
        }
        Op::GatherRows(a, indices) => {
            let c = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |dst| {
                for (row, (&idx, gv)) in indices.iter().zip(g).enumerate() {
                    dst[row * c + idx] += gv;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = w.square().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&w).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(&Tensor::vector(vec![5.0]));
        let loss = w.square().sum();
        let grads = loss.backward().unwrap();
        assert!(!grads.reached(&unused));
        assert_eq!(grads.wrt(&unused).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let err = w.backward().unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn tapes_stay_isolated() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.param(&Tensor::vector(vec![1.0]));
        let b = t2.param(&Tensor::vector(vec![1.0]));
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch { .. })));
        // backward on one tape leaves the other untouched
        let l1 = a.square().sum();
        let n2_before = t2.len();
        l1.backward().unwrap();
        assert_eq!(t2.len(), n2_before);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.param(&Tensor::matrix(2, 3, vec![0.0; 6]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn gather_and_diag_embed_roundtrip_gradients() {
        let tape = Tape::new();
        let m = tape.param(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let picked = m.gather_rows(&[1, 0]).unwrap();
        assert_eq!(picked.value().data(), &[2.0, 3.0]);
        let loss = picked.diag_embed().unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&m).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(&Tensor::vector(vec![3.0, 4.0, 5.0]));
        let cat = concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), vec![5]);
        let loss = cat.mul(&cat).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&a).data(), &[2.0, 4.0]);
        assert_eq!(grads.wrt(&b).data(), &[6.0, 8.0, 10.0]);

        let m = tape.param(&Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let stacked = concat_rows(&[m, a.clone()]).unwrap();
        assert_eq!(stacked.shape(), vec![2, 2]);
    }
}

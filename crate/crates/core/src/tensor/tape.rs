use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use super::kernels::{gemm, gemm_acc, Layout};
use super::Tensor;

/// Operation kinds recorded on a tape. Used for diagnostics and for fault
/// injection in gradient-check mutation tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    MatMulT,
    Transpose,
    Reshape,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    MaxRows,
    Pick,
    Relu,
    Exp,
    Log,
    LogGuarded,
    Sqrt,
    Square,
    Neg,
    AddScalar,
    MulScalar,
    BroadcastRows,
    IndexSelect,
    ConcatRows,
    SliceRows,
    DivByScalar,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// a[m,k] · b[k,n]
    MatMul(usize, usize),
    /// a[m,k] · b[n,k]ᵀ
    MatMulT(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    MaxRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    Relu(usize),
    Exp(usize),
    Log(usize),
    LogGuarded(usize, f32),
    Sqrt(usize),
    Square(usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    BroadcastRows(usize),
    IndexSelect(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    /// rows `[start, start + len)` of a matrix
    SliceRows(usize, usize),
    DivByScalar(usize, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::MaxRows(..) => OpKind::MaxRows,
            Op::Pick(..) => OpKind::Pick,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::LogGuarded(..) => OpKind::LogGuarded,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Square(..) => OpKind::Square,
            Op::Neg(..) => OpKind::Neg,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::BroadcastRows(..) => OpKind::BroadcastRows,
            Op::IndexSelect(..) => OpKind::IndexSelect,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::DivByScalar(..) => OpKind::DivByScalar,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and [`Tape::backward`] is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
    kink: Cell<f32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads[var.id].as_ref()
    }

    /// Gradient with respect to `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
            kink: Cell::new(f32::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Negates the backward rule of every node of `kind` on this tape.
    /// Only meant for mutation tests of the gradient checker.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    /// Smallest distance to a non-differentiable point seen so far: relu
    /// inputs near zero and max-over-row ties.
    pub fn kink_distance(&self) -> f32 {
        self.kink.get()
    }

    fn note_kink(&self, d: f32) {
        if d < self.kink.get() {
            self.kink.set(d);
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let out = f(&self.nodes.borrow()[a].value);
        let rg = self.requires(&[a]);
        self.push(out, op, rg)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'_> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let rg = self.requires(&[a, b]);
        self.push(out, op, rg)
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that the loss depends on.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.len(), 1, "backward needs a scalar loss, got {:?}", root.value.shape());
        assert!(root.requires_grad, "backward called on a tensor detached from every leaf");

        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let Some(mut g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if Some(node.op.kind()) == fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.filter(|_| n.requires_grad).map(|g| Tensor::new(n.value.shape().to_vec(), g)))
            .collect();
        Gradients { grads, shapes }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], id: usize) -> Option<&'a mut Vec<f32>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &x in [a, b].iter() {
                if let Some(ga) = acc(nodes, grads, *x) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (an, bn) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (an.rows(), an.cols(), bn.cols());
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_acc(Layout::NT, m, n, k, g, bn.data(), 1.0, ga);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_acc(Layout::TN, k, m, n, an.data(), g, 1.0, gb);
            }
        }
        Op::MatMulT(a, b) => {
            let (an, bn) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (an.rows(), an.cols(), bn.rows());
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_acc(Layout::NN, m, n, k, g, bn.data(), 1.0, ga);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_acc(Layout::TN, n, m, k, g, an.data(), 1.0, gb);
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let (r, c) = (out.rows(), out.cols());
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let s = g[0] / ga.len() as f32;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let an = &nodes[*a].value;
            let (r, c) = (an.rows(), an.cols());
            let scale = match &nodes[id].op {
                Op::MeanAxis(..) => 1.0 / if *axis == 0 { r } else { c } as f32,
                _ => 1.0,
            };
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        let gi = if *axis == 0 { j } else { i };
                        ga[i * c + j] += g[gi] * scale;
                    }
                }
            }
        }
        Op::MaxRows(a, argmax) | Op::Pick(a, argmax) => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, &j) in argmax.iter().enumerate() {
                    ga[i * c + j] += g[i];
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Exp(a) => {
            let ov = out.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * ov[i];
                }
            }
        }
        Op::Log(a) => {
            let av = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
        }
        Op::LogGuarded(a, eps) => {
            let av = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] > *eps {
                        ga[i] += g[i] / av[i];
                    }
                }
            }
        }
        Op::Sqrt(a) => {
            let ov = out.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / ov[i];
                }
            }
        }
        Op::Square(a) => {
            let av = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * av[i];
                }
            }
        }
        Op::Neg(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::MulScalar(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * c);
            }
        }
        Op::BroadcastRows(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let w = ga.len();
                for row in g.chunks(w) {
                    ga.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::IndexSelect(a, idx) => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(gp) = acc(nodes, grads, p) {
                    gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &s)| *d += s);
                }
                offset += n;
            }
        }
        Op::SliceRows(a, start) => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                ga[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
        }
        Op::DivByScalar(a, s) => {
            let (av, sv) = (val(*a), val(*s)[0]);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / sv;
                }
            }
            if let Some(gs) = acc(nodes, grads, *s) {
                let dot: f64 = g.iter().zip(av).map(|(&x, &y)| x as f64 * y as f64).sum();
                gs[0] -= (dot / (sv as f64 * sv as f64)) as f32;
            }
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn sum_f64(v: &[f32]) -> f32 {
    v.iter().map(|&x| x as f64).sum::<f64>() as f32
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f32 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape.binary(self.id, other.id, Op::Add(self.id, other.id), |a, b| zip_with(a, b, "add", |x, y| x + y))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape.binary(self.id, other.id, Op::Sub(self.id, other.id), |a, b| zip_with(a, b, "sub", |x, y| x - y))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape.binary(self.id, other.id, Op::Mul(self.id, other.id), |a, b| zip_with(a, b, "mul", |x, y| x * y))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape.binary(self.id, other.id, Op::Div(self.id, other.id), |a, b| {
            assert!(b.data().iter().all(|&v| v != 0.0), "div: zero divisor");
            zip_with(a, b, "div", |x, y| x / y)
        })
    }

    /// `self[m,k] · other[k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape.binary(self.id, other.id, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    /// `self[m,k] · other[n,k]ᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape.binary(self.id, other.id, Op::MatMulT(self.id, other.id), |a, b| {
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            assert_eq!(k, b.cols(), "matmul_t {:?} x {:?}ᵀ", a.shape(), b.shape());
            let mut out = vec![0.0; m * n];
            gemm(Layout::NT, m, k, n, a.data(), b.data(), &mut out);
            Tensor::new([m, n], out)
        })
    }

    pub fn transpose(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let shape = shape.to_vec();
        self.tape.unary(self.id, Op::Reshape(self.id), |a| a.clone().reshape(shape))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| Tensor::scalar(sum_f64(a.data())))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Mean(self.id), |a| Tensor::scalar(sum_f64(a.data()) / a.len() as f32))
    }

    /// Sum of a matrix over `axis` (0: down columns, 1: along rows).
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SumAxis(self.id, axis), |a| reduce_axis(a, axis, false))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::MeanAxis(self.id, axis), |a| reduce_axis(a, axis, true))
    }

    /// Row-wise maximum of a matrix. Ties resolve to the lowest column.
    pub fn max_rows(self) -> (Var<'t>, Vec<usize>) {
        self.max_rows_excluding(None)
    }

    /// Row-wise maximum skipping column `exclude[i]` in row `i`.
    pub fn max_rows_excluding(self, exclude: Option<&[usize]>) -> (Var<'t>, Vec<usize>) {
        let (vals, argmax, gap) = self.with_value(|a| {
            let (r, c) = (a.rows(), a.cols());
            if let Some(ex) = exclude {
                assert_eq!(ex.len(), r, "exclusion list length");
                assert!(c >= 2, "max over k != y needs at least two columns");
            }
            let mut vals = Vec::with_capacity(r);
            let mut argmax = Vec::with_capacity(r);
            let mut gap = f32::INFINITY;
            for i in 0..r {
                let row = a.row(i);
                let skip = exclude.map(|e| e[i]);
                let mut best: Option<usize> = None;
                let mut second = f32::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if Some(j) == skip {
                        continue;
                    }
                    match best {
                        None => best = Some(j),
                        Some(b) if v > row[b] => {
                            second = row[b];
                            best = Some(j);
                        }
                        Some(_) => second = second.max(v),
                    }
                }
                let b = best.expect("row with no eligible column");
                gap = gap.min(row[b] - second);
                vals.push(row[b]);
                argmax.push(b);
            }
            (vals, argmax, gap)
        });
        self.tape.note_kink(gap);
        let rg = self.requires_grad();
        let v = self.tape.push(Tensor::vector(vals), Op::MaxRows(self.id, argmax.clone()), rg);
        (v, argmax)
    }

    /// Per-row gather: `out[i] = self[i, idx[i]]`.
    pub fn pick(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let out = self.with_value(|a| {
            assert_eq!(idx.len(), a.rows(), "pick: index count");
            Tensor::vector(
                idx.iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        assert!(j < a.cols(), "pick: column {j} out of range {}", a.cols());
                        a.row(i)[j]
                    })
                    .collect(),
            )
        });
        let rg = self.requires_grad();
        self.tape.push(out, Op::Pick(self.id, idx), rg)
    }

    pub fn relu(self) -> Var<'t> {
        let gap = self.with_value(|a| a.data().iter().fold(f32::INFINITY, |m, v| m.min(v.abs())));
        self.tape.note_kink(gap);
        self.tape.unary(self.id, Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f32::exp))
    }

    /// Natural log; panics on non-positive input.
    pub fn log(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| {
            assert!(a.data().iter().all(|&v| v > 0.0), "log of non-positive value");
            a.map(f32::ln)
        })
    }

    /// `log(max(x, eps))`; the gradient is zero where the guard is active.
    pub fn log_guarded(self, eps: f32) -> Var<'t> {
        self.tape.unary(self.id, Op::LogGuarded(self.id, eps), |a| a.map(|v| v.max(eps).ln()))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| {
            assert!(a.data().iter().all(|&v| v > 0.0), "sqrt of non-positive value");
            a.map(f32::sqrt)
        })
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|v| v * v))
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| a.map(|v| -v))
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |a| a.map(|v| v + c))
    }

    pub fn mul_scalar(self, c: f32) -> Var<'t> {
        self.tape.unary(self.id, Op::MulScalar(self.id, c), |a| a.map(|v| v * c))
    }

    /// Repeats `self` along a new leading batch axis of extent `n`.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastRows(self.id), |a| {
            let mut shape = vec![n];
            shape.extend_from_slice(a.shape());
            Tensor::new(shape, a.data().repeat(n))
        })
    }

    /// `self[batch, f] + bias[f]` broadcast over the batch.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let n = self.shape()[0];
        self.add(bias.broadcast_rows(n))
    }

    /// Rows of a matrix gathered by index.
    pub fn index_select(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let out = self.with_value(|a| a.select_rows(&idx));
        let rg = self.requires_grad();
        self.tape.push(out, Op::IndexSelect(self.id, idx), rg)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat_rows(&vals)
        };
        let rg = tape.requires(&ids);
        tape.push(out, Op::ConcatRows(ids), rg)
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::SliceRows(self.id, start), |a| {
            assert!(start < end && end <= a.rows(), "slice_rows {start}..{end} of {} rows", a.rows());
            let c = a.cols();
            Tensor::new([end - start, c], a.data()[start * c..end * c].to_vec())
        })
    }

    /// Divides every element by the scalar node `s`.
    pub fn div_by_scalar(self, s: Var<'t>) -> Var<'t> {
        self.same_tape(&s);
        self.tape.binary(self.id, s.id, Op::DivByScalar(self.id, s.id), |a, s| {
            let sv = s.item();
            assert!(sv != 0.0, "division by zero scalar");
            a.map(|v| v / sv)
        })
    }

    /// Row-wise inner product of two equally shaped matrices.
    pub fn dot_rows(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum_axis(1)
    }
}

fn reduce_axis(a: &Tensor, axis: usize, mean: bool) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    assert!(axis < 2, "axis {axis} out of range for a matrix");
    let out: Vec<f32> = if axis == 0 {
        (0..c)
            .map(|j| {
                let s: f64 = (0..r).map(|i| a.data()[i * c + j] as f64).sum();
                (if mean { s / r as f64 } else { s }) as f32
            })
            .collect()
    } else {
        (0..r)
            .map(|i| {
                let s: f64 = a.row(i).iter().map(|&v| v as f64).sum();
                (if mean { s / c as f64 } else { s }) as f32
            })
            .collect()
    };
    Tensor::vector(out)
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(y.sum());
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_linearity_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new([3, 2], vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0]));
        let v = tape.constant(Tensor::new([2, 1], vec![1.0, 2.0]));
        let g = tape.backward(w.matmul(v).sum());
        assert_eq!(g.wrt(w).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn max_rows_records_argmax_and_routes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.2, 0.9]]));
        let (m, arg) = x.max_rows();
        assert_eq!(m.value().data(), &[0.9]);
        assert_eq!(arg, vec![2]);
        let g = tape.backward(m.sum());
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_tie_goes_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.7, 0.7, 0.1]]));
        let (m, arg) = x.max_rows();
        assert_eq!(arg, vec![0]);
        let g = tape.backward(m.sum());
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(tape.kink_distance(), 0.0);
    }

    #[test]
    fn excluded_max_skips_column() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.2, 0.9], vec![3.0, 0.0, 0.5]]));
        let (m, arg) = x.max_rows_excluding(Some(&[2, 0]));
        assert_eq!(m.value().data(), &[0.5, 0.5]);
        assert_eq!(arg, vec![0, 2]);
    }

    #[test]
    fn two_paths_sum_their_adjoints() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]));
        let a = x.square().sum();
        let b = x.mul_scalar(3.0).sum();
        let g = tape.backward(a + b);
        assert_eq!(g.wrt(x).data(), &[2.0 * 1.5 + 3.0, 2.0 * -2.0 + 3.0]);
    }

    #[test]
    fn broadcast_and_index_select_accumulate() {
        let tape = Tape::new();
        let e = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let rows = e.index_select(&[1, 1, 0]);
        assert_eq!(rows.value().row(0), &[3.0, 4.0]);
        let b = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let out = rows.add_row(b).sum();
        let g = tape.backward(out);
        assert_eq!(g.wrt(e).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    #[should_panic(expected = "detached")]
    fn backward_on_constant_panics() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        tape.backward(c);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_panics() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0]));
        let _ = a + b;
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn index_select_out_of_range_panics() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0]]));
        a.index_select(&[1]);
    }

    #[test]
    #[should_panic(expected = "non-positive")]
    fn raw_log_rejects_zero() {
        let tape = Tape::new();
        tape.leaf(Tensor::vector(vec![0.0])).log();
    }

    #[test]
    fn fault_injection_flips_sign() {
        let tape = Tape::new();
        tape.inject_fault(Some(OpKind::Square));
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let g = tape.backward(x.square().sum());
        assert_eq!(g.wrt(x).data(), &[-4.0]);
    }
}

//! Recording tape for reverse-mode differentiation over dense matrices.
//!
//! Every primitive evaluates eagerly and appends a node; nodes are stored in
//! creation order, which is already a topological order, so the backward pass
//! is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::mat::{argmax, argmax_excluding, Mat};
use super::DiffError;

#[derive(Debug, Clone)]
enum Op {
    Leaf { offset: Option<usize> },
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    SumRows(usize),
    LogSumExpRows(usize),
    Gather(usize, Rc<[usize]>),
    TileRows(usize, usize),
    Reshape(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf { .. } => [None, None],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::LogSumExpRows(a)
            | Op::Gather(a, _)
            | Op::TileRows(a, _)
            | Op::Reshape(a) => [Some(a), None],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::Gather(..) => "gather",
            Op::TileRows(..) => "tile_rows",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    /// Whether any trainable input feeds this node.
    live: bool,
}

/// Deliberate backward-rule corruption, used only to prove that the
/// gradient checker catches broken rules.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// tanh backward passes the upstream gradient through unchanged.
    TanhBackward,
}

/// Records primitives applied to [`Var`]s.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<&'static str>>,
    fault: Option<Fault>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First primitive whose forward value contained NaN or ±inf.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.non_finite.get()
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let live = match op {
            Op::Leaf { offset } => offset.is_some(),
            _ => op.parents().iter().flatten().any(|&p| nodes[p].live),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            live,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf { offset: None })
    }

    /// A value whose gradient is accumulated at `offset..offset+len` of the
    /// flat gradient produced by [`Tape::backward`].
    pub fn input(&self, value: Mat, offset: usize) -> Var<'_> {
        self.push(value, Op::Leaf { offset: Some(offset) })
    }

    /// Reverse sweep from a 1x1 `output`, returning a flat gradient of
    /// length `len` indexed by the offsets given to [`Tape::input`].
    pub fn backward(&self, output: Var<'_>, len: usize) -> Result<Vec<f64>, DiffError> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.idx].value.shape();
        if out_shape != (1, 1) {
            return Err(DiffError::NotScalar {
                rows: out_shape.0,
                cols: out_shape.1,
            });
        }
        let mut flat = vec![0.0; len];
        let mut grads: Vec<Option<Mat>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Mat::scalar(1.0));

        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient {
                    op: node.op.name(),
                });
            }
            let val = |i: usize| -> &Mat { &nodes[i].value };
            let mut acc = |i: usize, d: Mat| {
                if !nodes[i].live {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf { offset } => {
                    if let Some(off) = *offset {
                        for (f, v) in flat[off..off + g.data().len()].iter_mut().zip(g.data()) {
                            *f += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].live {
                        acc(*a, g.matmul_bt(val(*b)));
                    }
                    if nodes[*b].live {
                        acc(*b, val(*a).matmul_at(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if nodes[*a].live {
                        acc(*a, g.matmul(val(*b)));
                    }
                    if nodes[*b].live {
                        acc(*b, g.matmul_at(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].live {
                        acc(*a, g.zip_map(val(*b), |d, y| d * y));
                    }
                    if nodes[*b].live {
                        acc(*b, g.zip_map(val(*a), |d, x| d * x));
                    }
                }
                Op::AddRow(a, b) => {
                    let mut db = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(*a, g);
                    acc(*b, db);
                }
                Op::AddCol(a, b) => {
                    let db = Mat::column_vector((0..g.rows()).map(|i| g.row(i).iter().sum()).collect());
                    acc(*a, g);
                    acc(*b, db);
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::Shift(a) => acc(*a, g),
                Op::Tanh(a) => {
                    if self.fault == Some(Fault::TanhBackward) {
                        acc(*a, g);
                    } else {
                        acc(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y)));
                    }
                }
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |d, y| d / (2.0 * y))),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
                Op::Abs(a) => acc(
                    *a,
                    g.zip_map(val(*a), |d, x| {
                        if x > 0.0 {
                            d
                        } else if x < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::filled(r, c, g.get(0, 0)));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).fill(g.get(i, 0));
                    }
                    acc(*a, d);
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let mut d = Mat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let lse = node.value.get(i, 0);
                        let gi = g.get(i, 0);
                        for (dv, &xv) in d.row_mut(i).iter_mut().zip(x.row(i)) {
                            *dv = gi * (xv - lse).exp();
                        }
                    }
                    acc(*a, d);
                }
                Op::Gather(a, cols) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for (i, &j) in cols.iter().enumerate() {
                        d.set(i, j, g.get(i, 0));
                    }
                    acc(*a, d);
                }
                Op::TileRows(a, times) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for block in g.data().chunks_exact(r * c).take(*times) {
                        for (s, v) in d.data_mut().iter_mut().zip(block) {
                            *s += v;
                        }
                    }
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_vec(r, c, g.data().to_vec()));
                }
            }
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteGradient { op: "leaf" });
        }
        Ok(flat)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "Var::scalar on a non-scalar node");
        v.get(0, 0)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{}: shape mismatch", op.name());
        let v = a.zip_map(&b, f);
        self.tape.push(v, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value());
        self.tape.push(v, Op::MatMul(self.idx, other.idx))
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().matmul_bt(&other.value());
        self.tape.push(v, Op::MatMulBt(self.idx, other.idx))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.idx, other.idx), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.idx, other.idx), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.idx, other.idx), |a, b| a * b)
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let (a, b) = (self.value(), row.value());
        assert_eq!(b.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(a.cols(), b.cols(), "add_row: width mismatch");
        let mut v = (*a).clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.tape.push(v, Op::AddRow(self.idx, row.idx))
    }

    /// Adds an n×1 column to every column of an n×m matrix.
    pub fn add_col(&self, col: Var<'t>) -> Var<'t> {
        self.same_tape(&col);
        let (a, b) = (self.value(), col.value());
        assert_eq!(b.cols(), 1, "add_col: operand must be a single column");
        assert_eq!(a.rows(), b.rows(), "add_col: height mismatch");
        let mut v = (*a).clone();
        for i in 0..v.rows() {
            let c = b.get(i, 0);
            v.row_mut(i).iter_mut().for_each(|x| *x += c);
        }
        self.tape.push(v, Op::AddCol(self.idx, col.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, c: f64) -> Var<'t> {
        self.unary(Op::Shift(self.idx), |x| x + c)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), f64::tanh)
    }

    /// `max(0, x)`; also serves as the hinge `(x)_+`. Subgradient 0 at 0.
    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.idx), |x| x.max(0.0))
    }

    pub fn hinge(&self) -> Var<'t> {
        self.relu()
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.idx), f64::abs)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&self) -> Var<'t> {
        let v = Mat::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Per-row sums, n×1.
    pub fn sum_rows(&self) -> Var<'t> {
        let a = self.value();
        let v = Mat::column_vector((0..a.rows()).map(|i| a.row(i).iter().sum()).collect());
        self.tape.push(v, Op::SumRows(self.idx))
    }

    /// Per-row `log Σ_j exp(x_ij)`, n×1.
    pub fn log_sum_exp_rows(&self) -> Var<'t> {
        let a = self.value();
        let v = Mat::column_vector((0..a.rows()).map(|i| super::mat::log_sum_exp(a.row(i))).collect());
        self.tape.push(v, Op::LogSumExpRows(self.idx))
    }

    /// Picks entry `(i, cols[i])` of every row, n×1.
    pub fn gather(&self, cols: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(cols.len(), a.rows(), "gather: one column index per row");
        let v = Mat::column_vector(
            cols.iter()
                .enumerate()
                .map(|(i, &j)| {
                    assert!(j < a.cols(), "gather: column {j} out of range");
                    a.get(i, j)
                })
                .collect(),
        );
        self.tape.push(v, Op::Gather(self.idx, cols.into()))
    }

    /// `times` vertically stacked copies of an n×m matrix.
    pub fn tile_rows(&self, times: usize) -> Var<'t> {
        let a = self.value();
        let mut data = Vec::with_capacity(a.data().len() * times);
        for _ in 0..times {
            data.extend_from_slice(a.data());
        }
        self.tape.push(Mat::from_vec(a.rows() * times, a.cols(), data), Op::TileRows(self.idx, times))
    }

    /// Same entries in row-major order, new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(rows * cols, a.data().len(), "reshape: size mismatch");
        self.tape.push(Mat::from_vec(rows, cols, a.data().to_vec()), Op::Reshape(self.idx))
    }

    /// Row-wise maximum with the selected branch recorded (ties to the
    /// lowest index). Returns the n×1 maxima and the argmax per row.
    pub fn max_rows(&self) -> (Var<'t>, Vec<usize>) {
        let a = self.value();
        let idx: Vec<usize> = (0..a.rows()).map(|i| argmax(a.row(i))).collect();
        (self.gather(&idx), idx)
    }

    /// Row-wise largest and runner-up entries. The runner-up is the
    /// maximum over all columns except the row's argmax.
    pub fn top2_rows(&self) -> ((Var<'t>, Vec<usize>), (Var<'t>, Vec<usize>)) {
        let a = self.value();
        let first: Vec<usize> = (0..a.rows()).map(|i| argmax(a.row(i))).collect();
        let second: Vec<usize> = first
            .iter()
            .enumerate()
            .map(|(i, &j)| argmax_excluding(a.row(i), j))
            .collect();
        ((self.gather(&first), first), (self.gather(&second), second))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.input(Mat::scalar(3.0), 0);
        let y = x.square().sum();
        assert_eq!(y.scalar(), 9.0);
        let g = tape.backward(y, 1).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn reused_inputs_accumulate() {
        let tape = Tape::new();
        let x = tape.input(Mat::scalar(2.0), 0);
        let y = x.mul(x).add(x).sum();
        assert_eq!(tape.backward(y, 1).unwrap(), vec![5.0]);
    }

    #[test]
    fn forward_flags_first_non_finite_op() {
        let tape = Tape::new();
        let x = tape.constant(Mat::scalar(-1.0));
        let _ = x.ln().sqrt();
        assert_eq!(tape.non_finite_op(), Some("log"));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(Mat::zeros(2, 1), 0);
        assert!(matches!(
            tape.backward(x, 2),
            Err(DiffError::NotScalar { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn tile_and_reshape_route_gradients_back() {
        let tape = Tape::new();
        let x = tape.input(Mat::from_rows(&[[1.0, 2.0]]), 0);
        let t = x.tile_rows(3);
        assert_eq!(t.shape(), (3, 2));
        let r = t.reshape(2, 3);
        assert_eq!(r.value().row(1), &[2.0, 1.0, 2.0]);
        let w = tape.constant(Mat::from_rows(&[[1.0, 0.0, 2.0], [0.0, 3.0, 1.0]]));
        let y = r.mul(w).sum();
        // x0 picks up 1 + 2 + 3, x1 picks up 0 + 0 + 1.
        assert_eq!(tape.backward(y, 2).unwrap(), vec![6.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.input(Mat::scalar(1.5), 0);
        let c = tape.constant(Mat::scalar(4.0));
        let y = x.mul(c).sum();
        assert_eq!(tape.backward(y, 1).unwrap(), vec![4.0]);
    }
}

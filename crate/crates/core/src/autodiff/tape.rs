//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every operation appends a node holding its value and the ids of its inputs.
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.

use std::cell::{Ref, RefCell};

use crate::matrix::Matrix;
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Tanh,
    Sigmoid,
    Swish,
    Softplus,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ColSlice(Var, usize),
    Concat(Vec<Var>),
    PermuteCols(Var, Vec<usize>),
    ClampMin(Var, F),
    SoftmaxRows(Var),
    Transpose(Var),
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
}

/// A recording of matrix operations that can be differentiated once.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Matrix<F>>>,
    shapes: Vec<(usize, usize)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix<F> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Shape of `b` relative to `a` for broadcasting binary operations.
fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || b == (1, a.1) || b == (a.0, 1) || b == (1, 1)
}

#[inline]
fn bidx(b: (usize, usize), i: usize, j: usize) -> usize {
    let r = if b.0 == 1 { 0 } else { i };
    let c = if b.1 == 1 { 0 } else { j };
    r * b.1 + c
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<F>, op: Op<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Matrix<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v).item()
    }

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (va.shape(), vb.shape());
            assert!(
                broadcast_ok(sa, sb),
                "incompatible shapes {:?} and {:?} for {:?}",
                sa,
                sb,
                kind
            );
            let mut out = Matrix::zeros(sa.0, sa.1);
            let (bs, bd) = (sb, vb.as_slice());
            for i in 0..sa.0 {
                for j in 0..sa.1 {
                    let x = va[(i, j)];
                    let y = bd[bidx(bs, i, j)];
                    out[(i, j)] = match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    };
                }
            }
            out
        };
        self.push(value, Op::Binary(kind, a, b))
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&self, kind: UnaryKind, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.map(|x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Square => x * x,
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Swish => x * sigmoid(x),
                UnaryKind::Softplus => softplus(x),
            })
        };
        self.push(value, Op::Unary(kind, a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self, a: Var) -> Var {
        self.unary(UnaryKind::Swish, a)
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        let value = Matrix::scalar(self.nodes.borrow()[a.0].value.sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, F::one() / F::from_usize_lossy(n))
    }

    /// Column sums, as a `1 × cols` node.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let mut out = Matrix::zeros(1, v.cols());
            for i in 0..v.rows() {
                for (o, &x) in out.as_mut_slice().iter_mut().zip(v.row(i)) {
                    *o = *o + x;
                }
            }
            out
        };
        self.push(value, Op::SumRows(a))
    }

    /// Row sums, as a `rows × 1` node.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let sums: Vec<F> = (0..v.rows()).map(|i| v.row(i).iter().copied().sum()).collect();
            Matrix::column_vector(&sums)
        };
        self.push(value, Op::SumCols(a))
    }

    /// Columns `start..start + len`.
    pub fn col_slice(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes.borrow()[a.0].value.col_slice(start, len);
        self.push(value, Op::ColSlice(a, start))
    }

    /// Horizontal concatenation.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Matrix<F>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::hconcat(&mats)
        };
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&self, a: Var, perm: &[usize]) -> Var {
        let value = self.nodes.borrow()[a.0].value.select_cols(perm);
        self.push(value, Op::PermuteCols(a, perm.to_vec()))
    }

    /// `max(x, floor)`; entries below the floor pass no gradient.
    pub fn clamp_min(&self, a: Var, floor: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let mut out = v.clone();
            for i in 0..v.rows() {
                let row = out.row_mut(i);
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z = z + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / z;
                }
            }
            out
        };
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Accumulates adjoints of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.shape(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Matrix<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(F::one()));

        let accumulate = |grads: &mut Vec<Option<Matrix<F>>>, v: Var, g: Matrix<F>| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their adjoint for the caller.
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary(kind, a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let sb = vb.shape();
                    let (rows, cols) = va.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    let mut gb = Matrix::zeros(sb.0, sb.1);
                    for i in 0..rows {
                        for j in 0..cols {
                            let gij = g[(i, j)];
                            let k = bidx(sb, i, j);
                            let y = vb.as_slice()[k];
                            let (da, db) = match kind {
                                BinaryKind::Add => (gij, gij),
                                BinaryKind::Sub => (gij, -gij),
                                BinaryKind::Mul => (gij * y, gij * va[(i, j)]),
                                BinaryKind::Div => (gij / y, -gij * va[(i, j)] / (y * y)),
                            };
                            ga[(i, j)] = da;
                            gb.as_mut_slice()[k] = gb.as_slice()[k] + db;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Unary(kind, a) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let mut ga = g.clone();
                    for ((gv, &xv), &yv) in ga
                        .as_mut_slice()
                        .iter_mut()
                        .zip(x.as_slice())
                        .zip(y.as_slice())
                    {
                        let d = match kind {
                            UnaryKind::Neg => -F::one(),
                            UnaryKind::Exp => yv,
                            UnaryKind::Log => F::one() / xv,
                            UnaryKind::Square => F::lit(2.0) * xv,
                            UnaryKind::Sqrt => F::lit(0.5) / yv,
                            UnaryKind::Tanh => F::one() - yv * yv,
                            UnaryKind::Sigmoid => yv * (F::one() - yv),
                            UnaryKind::Swish => {
                                let s = sigmoid(xv);
                                s + xv * s * (F::one() - s)
                            }
                            UnaryKind::Softplus => sigmoid(xv),
                        };
                        *gv = *gv * d;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    accumulate(&mut grads, *a, g.matmul_nt(vb));
                    accumulate(&mut grads, *b, va.matmul_tn(&g));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::SumAll(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(g.row(0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g[(i, 0)];
                        ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColSlice(a, start) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        accumulate(&mut grads, *p, g.col_slice(offset, w));
                        offset += w;
                    }
                }
                Op::PermuteCols(a, perm) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for (j, &src) in perm.iter().enumerate() {
                            ga[(i, src)] = ga[(i, src)] + g[(i, j)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let x = &nodes[a.0].value;
                    let ga = g.zip_map(x, |gv, xv| if xv >= *floor { gv } else { F::zero() });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let dot: F = g.row(i).iter().zip(y.row(i)).map(|(&gv, &yv)| gv * yv).sum();
                        for (o, (&gv, &yv)) in ga.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i))) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(nodes.len(), None);
        Gradients { grads, shapes }
    }
}

//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! the adjoint of every node. Shape errors inside tape operations are
//! programming errors and panic; public APIs validate shapes before
//! building graphs.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::error::Result;
use crate::numerics::{
    back_substitute, cholesky_jitter, forward_substitute, gemm, DenseMatrix, JitterLadder,
};

/// Sentinel in gather index lists meaning "write zero".
pub const GATHER_ZERO: usize = usize::MAX;

/// Floor applied inside `sqrt` so the derivative stays finite.
pub const SQRT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    ClampMin(usize, f64),
    MatMul { a: usize, ta: bool, b: usize, tb: bool },
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    Diag(usize),
    LowerFactor(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    ConcatCols(Vec<usize>),
    SqDist(usize, usize),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> DenseMatrix {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: DenseMatrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: DenseMatrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(DenseMatrix::scalar(v))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&DenseMatrix) -> DenseMatrix) -> Var<'_> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].needs_grad)
        };
        self.push(value, op, needs)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&DenseMatrix, &DenseMatrix) -> DenseMatrix,
    ) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.shape(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let n = loss.id + 1;
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; nodes.len()];
        grads[loss.id] = Some(DenseMatrix::scalar(1.0));
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], nodes: &[Node], id: usize, g: DenseMatrix) {
    if !nodes[id].needs_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape());
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            if need(a) {
                accumulate(grads, nodes, a, reduce_to(g, val(a).shape()));
            }
            if need(b) {
                accumulate(grads, nodes, b, reduce_to(g, val(b).shape()));
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            if need(a) {
                accumulate(grads, nodes, a, reduce_to(g, val(a).shape()));
            }
            if need(b) {
                accumulate(grads, nodes, b, reduce_to(&g.scale(-1.0), val(b).shape()));
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if need(a) {
                let ga = broadcast_map(g, val(b), |x, y| x * y);
                accumulate(grads, nodes, a, reduce_to(&ga, val(a).shape()));
            }
            if need(b) {
                let gb = broadcast_map(g, val(a), |x, y| x * y);
                accumulate(grads, nodes, b, reduce_to(&gb, val(b).shape()));
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            if need(a) {
                let ga = broadcast_map(g, val(b), |x, y| x / y);
                accumulate(grads, nodes, a, reduce_to(&ga, val(a).shape()));
            }
            if need(b) {
                // d(a/b)/db = -out / b
                let q = broadcast_map(out, val(b), |o, y| -o / y);
                let gb = q.zip_map(g, |x, y| x * y);
                accumulate(grads, nodes, b, reduce_to(&gb, val(b).shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.scale(-1.0)),
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(out, |x, y| x * y)),
        Op::Ln(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| x / y)),
        Op::Sqrt(a) => {
            let ga = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                if val(*a).get(i, j) > SQRT_FLOOR {
                    0.5 * g.get(i, j) / out.get(i, j)
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, ga)
        }
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
        Op::Softplus(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
        Op::ClampMin(a, floor) => {
            let f = *floor;
            accumulate(
                grads,
                nodes,
                *a,
                g.zip_map(val(*a), |x, y| if y > f { x } else { 0.0 }),
            )
        }
        Op::MatMul { a, ta, b, tb } => {
            let (a, ta, b, tb) = (*a, *ta, *b, *tb);
            if need(a) {
                let ga = if ta {
                    gemm(val(b), tb, g, true)
                } else {
                    gemm(g, false, val(b), !tb)
                };
                accumulate(grads, nodes, a, ga.expect("matmul adjoint"));
            }
            if need(b) {
                let gb = if tb {
                    gemm(g, true, val(a), ta)
                } else {
                    gemm(val(a), !ta, g, false)
                };
                accumulate(grads, nodes, b, gb.expect("matmul adjoint"));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, DenseMatrix::filled(r, c, g.get(0, 0)))
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, DenseMatrix::from_fn(r, c, |_, j| g.get(0, j)))
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)))
        }
        Op::Cholesky(a) => {
            // Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹), Φ = lower triangle with halved diagonal
            let l = out;
            let gl = tril(g);
            let mut p = gemm(l, true, &gl, false).expect("square");
            phi_in_place(&mut p);
            let y = back_substitute(l, &p);
            let s = back_substitute(l, &y.transpose()).transpose();
            let sym = s.zip_map(&s.transpose(), |x, y| 0.5 * (x + y));
            accumulate(grads, nodes, *a, sym)
        }
        Op::SolveLower(l, b) => {
            let (l, b) = (*l, *b);
            let gb = back_substitute(val(l), g);
            if need(l) {
                let gl = gemm(&gb, false, out, true).expect("shapes");
                accumulate(grads, nodes, l, tril(&gl).scale(-1.0));
            }
            accumulate(grads, nodes, b, gb);
        }
        Op::SolveLowerT(l, b) => {
            let (l, b) = (*l, *b);
            let gb = forward_substitute(val(l), g);
            if need(l) {
                let gl = gemm(out, false, &gb, true).expect("shapes");
                accumulate(grads, nodes, l, tril(&gl).scale(-1.0));
            }
            accumulate(grads, nodes, b, gb);
        }
        Op::Diag(a) => {
            let n = val(*a).rows();
            let mut ga = DenseMatrix::zeros(n, n);
            for i in 0..n {
                ga.set(i, i, g.get(i, 0));
            }
            accumulate(grads, nodes, *a, ga)
        }
        Op::LowerFactor(a) => {
            let raw = val(*a);
            let ga = DenseMatrix::from_fn(raw.rows(), raw.cols(), |i, j| {
                if i == j {
                    g.get(i, j) * sigmoid(raw.get(i, j))
                } else if i > j {
                    g.get(i, j)
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, ga)
        }
        Op::Reshape(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, DenseMatrix::from_vec(r, c, g.data().to_vec()))
        }
        Op::Gather(a, idx) => {
            let (r, c) = val(*a).shape();
            let mut ga = vec![0.0; r * c];
            for (k, &src) in idx.iter().enumerate() {
                if src != GATHER_ZERO {
                    ga[src] += g.data()[k];
                }
            }
            accumulate(grads, nodes, *a, DenseMatrix::from_vec(r, c, ga))
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                if need(p) {
                    let gp = DenseMatrix::from_fn(r, c, |i, j| g.get(i, off + j));
                    accumulate(grads, nodes, p, gp);
                }
                off += c;
            }
        }
        Op::SqDist(x, z) => {
            let (x, z) = (*x, *z);
            let (xv, zv) = (val(x), val(z));
            let d = xv.cols();
            let mut gx = DenseMatrix::zeros(xv.rows(), d);
            let mut gz = DenseMatrix::zeros(zv.rows(), d);
            for i in 0..xv.rows() {
                let xi = xv.row(i);
                for j in 0..zv.rows() {
                    let w = 2.0 * g.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let zj = zv.row(j);
                    for k in 0..d {
                        let t = w * (xi[k] - zj[k]);
                        gx.data_mut()[i * d + k] += t;
                        gz.data_mut()[j * d + k] -= t;
                    }
                }
            }
            if need(x) {
                accumulate(grads, nodes, x, gx);
            }
            if need(z) {
                accumulate(grads, nodes, z, gz);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn tril(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| if i >= j { m.get(i, j) } else { 0.0 })
}

fn phi_in_place(m: &mut DenseMatrix) {
    let n = m.rows();
    for i in 0..n {
        for j in 0..n {
            if j > i {
                m.set(i, j, 0.0);
            } else if i == j {
                m.set(i, j, 0.5 * m.get(i, j));
            }
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_map(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DenseMatrix::from_fn(r, c, |i, j| {
        f(
            a.get(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j }),
            b.get(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j }),
        )
    })
}

fn reduce_to(g: &DenseMatrix, shape: (usize, usize)) -> DenseMatrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = DenseMatrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (
                if shape.0 == 1 { 0 } else { i },
                if shape.1 == 1 { 0 } else { j },
            );
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> DenseMatrix {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&DenseMatrix) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|m| m.shape())
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self) -> f64 {
        self.with_value(|m| {
            assert_eq!(m.shape(), (1, 1), "not a scalar");
            m.get(0, 0)
        })
    }

    fn un(self, op: Op, f: impl FnOnce(&DenseMatrix) -> DenseMatrix) -> Self {
        self.tape.unary(self.id, op, f)
    }

    pub fn scale(self, s: f64) -> Self {
        self.un(Op::Scale(self.id, s), |m| m.scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Self {
        self.un(Op::AddScalar(self.id), |m| m.map(|v| v + s))
    }

    pub fn exp(self) -> Self {
        self.un(Op::Exp(self.id), |m| m.map(f64::exp))
    }

    pub fn ln(self) -> Self {
        self.un(Op::Ln(self.id), |m| m.map(f64::ln))
    }

    /// `√max(x, 1e-12)`.
    pub fn sqrt(self) -> Self {
        self.un(Op::Sqrt(self.id), |m| m.map(|v| v.max(SQRT_FLOOR).sqrt()))
    }

    pub fn square(self) -> Self {
        self.un(Op::Square(self.id), |m| m.map(|v| v * v))
    }

    pub fn softplus(self) -> Self {
        self.un(Op::Softplus(self.id), |m| m.map(softplus))
    }

    /// `max(x, floor)` with zero gradient where clamped.
    pub fn clamp_min(self, floor: f64) -> Self {
        self.un(Op::ClampMin(self.id, floor), |m| m.map(|v| v.max(floor)))
    }

    fn mm(self, ta: bool, other: Var<'t>, tb: bool) -> Self {
        let op = Op::MatMul { a: self.id, ta, b: other.id, tb };
        self.tape.binary(self.id, other.id, op, |a, b| {
            gemm(a, ta, b, tb).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Self {
        self.mm(false, other, false)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(self, other: Var<'t>) -> Self {
        self.mm(true, other, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Self {
        self.mm(false, other, true)
    }

    pub fn t(self) -> Self {
        self.un(Op::Transpose(self.id), |m| m.transpose())
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(self) -> Self {
        self.un(Op::Sum(self.id), |m| DenseMatrix::scalar(m.sum()))
    }

    /// Column sums as a 1×c row.
    pub fn sum_rows(self) -> Self {
        self.un(Op::SumRows(self.id), |m| {
            let mut out = vec![0.0; m.cols()];
            for i in 0..m.rows() {
                for (o, v) in out.iter_mut().zip(m.row(i)) {
                    *o += v;
                }
            }
            DenseMatrix::from_vec(1, m.cols(), out)
        })
    }

    /// Row sums as an r×1 column.
    pub fn sum_cols(self) -> Self {
        self.un(Op::SumCols(self.id), |m| {
            DenseMatrix::from_vec(m.rows(), 1, (0..m.rows()).map(|i| m.row(i).iter().sum()).collect())
        })
    }

    /// Jittered Cholesky factor of a symmetric matrix.
    pub fn cholesky(self, ladder: &JitterLadder) -> Result<Self> {
        let chol = self.with_value(|m| cholesky_jitter(m, ladder))?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(chol.lower.into_dense(), Op::Cholesky(self.id), needs))
    }

    /// `L⁻¹ b` where `self` holds a lower-triangular factor.
    pub fn solve_lower(self, b: Var<'t>) -> Self {
        self.tape.binary(self.id, b.id, Op::SolveLower(self.id, b.id), |l, b| {
            assert_eq!(l.rows(), b.rows(), "solve_lower shapes");
            forward_substitute(l, b)
        })
    }

    /// `L⁻ᵀ b` where `self` holds a lower-triangular factor.
    pub fn solve_lower_t(self, b: Var<'t>) -> Self {
        self.tape.binary(self.id, b.id, Op::SolveLowerT(self.id, b.id), |l, b| {
            assert_eq!(l.rows(), b.rows(), "solve_lower_t shapes");
            back_substitute(l, b)
        })
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Self {
        self.un(Op::Diag(self.id), |m| DenseMatrix::column(&m.diagonal()))
    }

    /// Lower triangle with a softplus-mapped diagonal: an unconstrained
    /// square parameter becomes a valid Cholesky factor.
    pub fn lower_factor(self) -> Self {
        self.un(Op::LowerFactor(self.id), |m| {
            DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Equal => softplus(m.get(i, j)),
                std::cmp::Ordering::Greater => m.get(i, j),
                std::cmp::Ordering::Less => 0.0,
            })
        })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Self {
        self.un(Op::Reshape(self.id), |m| {
            m.clone().reshape(rows, cols).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    /// Flat gather: output entry `k` is `self.data[idx[k]]`, or zero for
    /// [`GATHER_ZERO`].
    pub fn gather(self, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Self {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let op = Op::Gather(self.id, idx.clone());
        self.un(op, |m| {
            let src = m.data();
            DenseMatrix::from_vec(
                rows,
                cols,
                idx.iter()
                    .map(|&k| if k == GATHER_ZERO { 0.0 } else { src[k] })
                    .collect(),
            )
        })
    }

    /// Selects whole rows.
    pub fn select_rows(self, rows: &[usize]) -> Self {
        let c = self.cols();
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(Rc::new(idx), rows.len(), c)
    }

    /// Selects whole columns.
    pub fn select_cols(self, cols: &[usize]) -> Self {
        let (r, c) = self.shape();
        let idx: Vec<usize> = (0..r).flat_map(|i| cols.iter().map(move |&j| i * c + j)).collect();
        self.gather(Rc::new(idx), r, cols.len())
    }

    /// Squared Euclidean distances between the rows of `self` and `other`.
    pub fn sq_dist(self, other: Var<'t>) -> Self {
        self.tape.binary(self.id, other.id, Op::SqDist(self.id, other.id), |x, z| {
            assert_eq!(x.cols(), z.cols(), "sq_dist feature dims");
            sq_dist(x, z)
        })
    }
}

/// Plain squared-distance matrix, computed entry by entry.
pub fn sq_dist(x: &DenseMatrix, z: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), z.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let zj = z.row(j);
            *o = xi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    out
}

/// Horizontal concatenation.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let tape = parts[0].tape;
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let r = nodes[ids[0]].value.rows();
        let total: usize = ids.iter().map(|&i| nodes[i].value.cols()).sum();
        let mut out = DenseMatrix::zeros(r, total);
        for i in 0..r {
            let mut off = 0;
            for &p in &ids {
                let m = &nodes[p].value;
                assert_eq!(m.rows(), r, "concat_cols row counts");
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
                off += m.cols();
            }
        }
        out
    };
    let needs = tape.needs(&ids);
    tape.push(value, Op::ConcatCols(ids), needs)
}

macro_rules! bin_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> ops::$trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.binary(self.id, rhs.id, Op::$variant(self.id, rhs.id), |a, b| {
                    broadcast_map(a, b, $f)
                })
            }
        }
        impl<'t> ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.scalar(rhs);
                ops::$trait::$method(self, c)
            }
        }
        impl<'t> ops::$trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.scalar(self);
                ops::$trait::$method(c, rhs)
            }
        }
    };
}

bin_op!(Add, add, Add, |x, y| x + y);
bin_op!(Sub, sub, Sub, |x, y| x - y);
bin_op!(Mul, mul, Mul, |x, y| x * y);
bin_op!(Div, div, Div, |x, y| x / y);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.un(Op::Neg(self.id), |m| m.scale(-1.0))
    }
}

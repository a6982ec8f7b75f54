//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! accumulates adjoints. Values are `f64` matrices throughout; vectors are
//! `n x 1` columns and scalars are `1 x 1`.
//!
//! Besides the usual elementwise and linear-algebra primitives the tape has
//! dedicated adjoints for the Cholesky factorization, triangular solves and
//! the Matérn cross-covariance, so the cost of a backward pass stays within
//! a small constant of the forward pass.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernels::{self, Smoothness};

pub type Mat = DMatrix<f64>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize),
    Sum(usize),
    ColSums(usize),
    RowSums(usize),
    Gather {
        src: usize,
        idx: Vec<usize>,
        coef: Vec<f64>,
    },
    HConcat(usize, usize),
    Diag(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    LogSumExpRows(usize),
    CholParam(usize),
    Kernel {
        x1: usize,
        x2: usize,
        log_ls: usize,
        log_os: usize,
        smoothness: Smoothness,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the output did not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Mat {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.idx];
                Mat::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives an adjoint.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.idx].value.shape(),
            (1, 1),
            "backward expects a scalar output"
        );
        let n = output.idx + 1;
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.idx] = Some(Mat::from_element(1, 1, 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let val = |j: usize| &nodes[j].value;
            let mut deltas: Vec<(usize, Mat)> = Vec::with_capacity(2);
            let mut acc = |j: usize, delta: Mat| {
                if nodes[j].requires_grad {
                    deltas.push((j, delta));
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.component_mul(val(*b)));
                    acc(*b, g.component_mul(val(*a)));
                }
                Op::Div(a, b) => {
                    let gb = -g.component_mul(out).component_div(val(*b));
                    acc(*a, g.component_div(val(*b)));
                    acc(*b, gb);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Offset(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(*a, &g * val(*b).transpose());
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, val(*a).transpose() * &g);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Exp(a) => acc(*a, g.component_mul(out)),
                Op::Ln(a) => acc(*a, g.component_div(val(*a))),
                Op::Sqrt(a) => acc(*a, g.zip_map(out, |gi, s| 0.5 * gi / s)),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x)),
                Op::ClampMin(a) => acc(*a, g),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::ColSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::Gather { src, idx, coef } => {
                    let (r, c) = val(*src).shape();
                    let mut d = Mat::zeros(r, c);
                    {
                        let ds = d.as_mut_slice();
                        let gs = g.as_slice();
                        for k in 0..idx.len() {
                            ds[idx[k]] += coef[k] * gs[k];
                        }
                    }
                    acc(*src, d);
                }
                Op::HConcat(a, b) => {
                    let ca = val(*a).ncols();
                    let cb = val(*b).ncols();
                    acc(*a, g.columns(0, ca).into_owned());
                    acc(*b, g.columns(ca, cb).into_owned());
                }
                Op::Diag(a) => {
                    let n = val(*a).nrows();
                    let mut d = Mat::zeros(n, val(*a).ncols());
                    for k in 0..g.nrows() {
                        d[(k, k)] = g[(k, 0)];
                    }
                    acc(*a, d);
                }
                Op::Cholesky(a) => acc(*a, cholesky_adjoint(out, &g)),
                Op::SolveLower(l, b) => {
                    // C = L^{-1} B:  Bbar = L^{-T} Cbar,  Lbar = -tril(Bbar C^T)
                    let lv = val(*l);
                    let bbar = lv
                        .tr_solve_lower_triangular(&g)
                        .expect("triangular factor is nonsingular");
                    if nodes[*l].requires_grad {
                        acc(*l, (-(&bbar * out.transpose())).lower_triangle());
                    }
                    acc(*b, bbar);
                }
                Op::SolveLowerT(l, b) => {
                    // C = L^{-T} B:  Bbar = L^{-1} Cbar,  Lbar = -tril(C Bbar^T)
                    let lv = val(*l);
                    let bbar = lv
                        .solve_lower_triangular(&g)
                        .expect("triangular factor is nonsingular");
                    if nodes[*l].requires_grad {
                        acc(*l, (-(out * bbar.transpose())).lower_triangle());
                    }
                    acc(*b, bbar);
                }
                Op::LogSumExpRows(a) => {
                    let av = val(*a);
                    let d = Mat::from_fn(av.nrows(), av.ncols(), |r, c| {
                        g[(r, 0)] * (av[(r, c)] - out[(r, 0)]).exp()
                    });
                    acc(*a, d);
                }
                Op::CholParam(a) => {
                    let n = out.nrows();
                    let d = Mat::from_fn(n, n, |r, c| match r.cmp(&c) {
                        std::cmp::Ordering::Greater => g[(r, c)],
                        std::cmp::Ordering::Equal => g[(r, c)] * out[(r, c)],
                        std::cmp::Ordering::Less => 0.0,
                    });
                    acc(*a, d);
                }
                Op::Kernel {
                    x1,
                    x2,
                    log_ls,
                    log_os,
                    smoothness,
                } => {
                    let adj = kernels::matern_cross_adjoint(
                        val(*x1),
                        val(*x2),
                        val(*log_ls).as_slice(),
                        val(*log_os)[(0, 0)],
                        *smoothness,
                        out,
                        &g,
                        nodes[*x1].requires_grad,
                        nodes[*x2].requires_grad,
                    );
                    if let Some(dx1) = adj.x1 {
                        acc(*x1, dx1);
                    }
                    if let Some(dx2) = adj.x2 {
                        acc(*x2, dx2);
                    }
                    let ls_shape = val(*log_ls).shape();
                    acc(
                        *log_ls,
                        Mat::from_column_slice(ls_shape.0, ls_shape.1, &adj.log_lengthscales),
                    );
                    acc(*log_os, Mat::from_element(1, 1, adj.log_outputscale));
                }
            }
            for (j, delta) in deltas {
                match &mut grads[j] {
                    Some(existing) => *existing += delta,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

/// Adjoint of `L = chol(A)` for symmetric `A`, returned as a symmetric matrix.
fn cholesky_adjoint(l: &Mat, lbar: &Mat) -> Mat {
    let n = l.nrows();
    // P = Phi(L^T Lbar), Phi = lower triangle with halved diagonal
    let mut p = (l.transpose() * lbar.lower_triangle()).lower_triangle();
    for k in 0..n {
        p[(k, k)] *= 0.5;
    }
    // S = L^{-T} P L^{-1}
    let left = l
        .tr_solve_lower_triangular(&p)
        .expect("cholesky factor is nonsingular");
    let s = l
        .tr_solve_lower_triangular(&left.transpose())
        .expect("cholesky factor is nonsingular")
        .transpose();
    (&s + s.transpose()) * 0.5
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Mat> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn nrows(&self) -> usize {
        self.shape().0
    }

    pub fn ncols(&self) -> usize {
        self.shape().1
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    fn unary(&self, value: Mat, op: Op) -> Var<'t> {
        let rg = self.tape.needs(self.idx);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Mat, op: Op) -> Var<'t> {
        let rg = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, op, rg)
    }

    fn check_same_shape(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.check_same_shape(&other, "mul");
        let v = self.value().component_mul(&*other.value());
        self.binary(other, v, Op::Mul(self.idx, other.idx))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.check_same_shape(&other, "div");
        let v = self.value().component_div(&*other.value());
        self.binary(other, v, Op::Div(self.idx, other.idx))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.idx, c))
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().add_scalar(c);
        self.unary(v, Op::Offset(self.idx))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::MatMul(self.idx, other.idx))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.idx))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.idx))
    }

    /// `max(x, lo)` in value; the adjoint passes through unchanged.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(lo));
        self.unary(v, Op::ClampMin(self.idx))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Mat::from_element(1, 1, self.value().sum());
        self.unary(v, Op::Sum(self.idx))
    }

    /// `1 x n` row of column sums.
    pub fn col_sums(self) -> Var<'t> {
        let v = self.value().row_sum();
        let v = Mat::from_row_slice(1, v.len(), v.as_slice());
        self.unary(v, Op::ColSums(self.idx))
    }

    /// `m x 1` column of row sums.
    pub fn row_sums(self) -> Var<'t> {
        let v = self.value().column_sum();
        let v = Mat::from_column_slice(v.len(), 1, v.as_slice());
        self.unary(v, Op::RowSums(self.idx))
    }

    /// `out[k] = coef[k] * self[idx[k]]` over column-major linear indices.
    pub fn gather(self, rows: usize, cols: usize, idx: Vec<usize>, coef: Vec<f64>) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols);
        assert_eq!(coef.len(), idx.len());
        let v = {
            let src = self.value();
            let s = src.as_slice();
            let data: Vec<f64> = idx.iter().zip(&coef).map(|(&i, &c)| c * s[i]).collect();
            Mat::from_vec(rows, cols, data)
        };
        self.unary(
            v,
            Op::Gather {
                src: self.idx,
                idx,
                coef,
            },
        )
    }

    /// Plain index gather with unit coefficients.
    pub fn select(self, rows: usize, cols: usize, idx: Vec<usize>) -> Var<'t> {
        let coef = vec![1.0; idx.len()];
        self.gather(rows, cols, idx, coef)
    }

    /// Broadcasts a `1 x 1`, `1 x cols` or `rows x 1` node to `rows x cols`.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        let (r, c) = self.shape();
        if (r, c) == (rows, cols) {
            return self;
        }
        let idx: Vec<usize> = match (r, c) {
            (1, 1) => vec![0; rows * cols],
            (1, cc) if cc == cols => (0..cols).flat_map(|j| std::iter::repeat_n(j, rows)).collect(),
            (rr, 1) if rr == rows => (0..cols).flat_map(|_| 0..rows).collect(),
            _ => panic!("cannot broadcast {r}x{c} to {rows}x{cols}"),
        };
        self.select(rows, cols, idx)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(rows * cols, self.value().len());
        self.select(rows, cols, (0..rows * cols).collect())
    }

    /// Picks whole rows: output row `k` is input row `rows[k]`.
    pub fn select_rows(self, rows: &[usize]) -> Var<'t> {
        let (nr, nc) = self.shape();
        let mut idx = Vec::with_capacity(rows.len() * nc);
        for j in 0..nc {
            idx.extend(rows.iter().map(|&r| j * nr + r));
        }
        self.select(rows.len(), nc, idx)
    }

    pub fn column(self, j: usize) -> Var<'t> {
        let nr = self.nrows();
        self.select(nr, 1, (j * nr..(j + 1) * nr).collect())
    }

    pub fn hconcat(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.nrows(), b.nrows(), "hconcat: row mismatch");
        let mut v = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
        v.columns_mut(0, a.ncols()).copy_from(&*a);
        v.columns_mut(a.ncols(), b.ncols()).copy_from(&*b);
        drop((a, b));
        self.binary(other, v, Op::HConcat(self.idx, other.idx))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Var<'t> {
        let d = self.value().diagonal();
        let v = Mat::from_column_slice(d.len(), 1, d.as_slice());
        self.unary(v, Op::Diag(self.idx))
    }

    /// Lower Cholesky factor, with jitter escalation from
    /// [`kernels::robust_cholesky`]. The jitter is treated as a constant.
    pub fn cholesky(self) -> Result<Var<'t>> {
        let f = kernels::robust_cholesky(&self.value())?;
        Ok(self.unary(f.factor, Op::Cholesky(self.idx)))
    }

    /// `L^{-1} B` for lower-triangular `self`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let v = self
            .value()
            .solve_lower_triangular(&*b.value())
            .expect("triangular factor is nonsingular");
        self.binary(b, v, Op::SolveLower(self.idx, b.idx))
    }

    /// `L^{-T} B` for lower-triangular `self`.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let v = self
            .value()
            .tr_solve_lower_triangular(&*b.value())
            .expect("triangular factor is nonsingular");
        self.binary(b, v, Op::SolveLowerT(self.idx, b.idx))
    }

    /// Row-wise `log(sum(exp(.)))`, max-shifted.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let v = {
            let a = self.value();
            Mat::from_fn(a.nrows(), 1, |r, _| {
                logsumexp(a.row(r).iter().copied())
            })
        };
        self.unary(v, Op::LogSumExpRows(self.idx))
    }

    /// Maps an unconstrained square matrix to a lower-triangular factor with
    /// positive diagonal: strict lower part copied, diagonal exponentiated.
    pub fn chol_param(self) -> Var<'t> {
        let v = {
            let a = self.value();
            let n = a.nrows();
            Mat::from_fn(n, n, |r, c| match r.cmp(&c) {
                std::cmp::Ordering::Greater => a[(r, c)],
                std::cmp::Ordering::Equal => a[(r, c)].exp(),
                std::cmp::Ordering::Less => 0.0,
            })
        };
        self.unary(v, Op::CholParam(self.idx))
    }

    /// Matérn cross-covariance between the rows of `self` and of `other`.
    pub fn matern(self, other: Var<'t>, log_ls: Var<'t>, log_os: Var<'t>, smoothness: Smoothness) -> Var<'t> {
        let v = kernels::matern_cross(
            &self.value(),
            &other.value(),
            log_ls.value().as_slice(),
            log_os.item(),
            smoothness,
        );
        let t = self.tape;
        let rg = [self.idx, other.idx, log_ls.idx, log_os.idx]
            .iter()
            .any(|&i| t.needs(i));
        t.push(
            v,
            Op::Kernel {
                x1: self.idx,
                x2: other.idx,
                log_ls: log_ls.idx,
                log_os: log_os.idx,
                smoothness,
            },
            rg,
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, other: Var<'t>) -> Var<'t> {
        self.check_same_shape(&other, "add");
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.idx, other.idx))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, other: Var<'t>) -> Var<'t> {
        self.check_same_shape(&other, "sub");
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.idx, other.idx))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Max-shifted `log(sum(exp(x)))`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

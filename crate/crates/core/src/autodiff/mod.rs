//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! at record time and stored on the node, so numerical failures surface at the
//! operation that caused them. [`Tape::backward`] then walks the nodes once in
//! reverse order. Nodes are appended only after their inputs, which keeps the
//! tape topologically sorted by construction.
//!
//! Shape errors are programming errors and panic, the same way `nalgebra`
//! treats mismatched operands. Numerical failures (a singular triangular
//! solve, an indefinite Cholesky input) are returned as [`Error`]s.

mod backward;
mod gradcheck;
mod ops;

use std::cell::{Ref, RefCell};

use crate::error::Result;
use crate::linalg::Matrix;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{softplus, sigmoid, inverse_softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Square,
    Reciprocal,
    Sqrt,
    Neg,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulElem(usize, usize),
    MaskMul(usize, Matrix),
    DiagMul { diag: usize, mat: usize },
    ScaleVar { scalar: usize, mat: usize },
    LinComb(Vec<(usize, f64)>),
    Transpose(usize),
    Unary(usize, Unary),
    Sum(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice { src: usize, row: usize, col: usize },
    Diag(usize),
    DiagEmbed(usize),
    Cholesky(usize),
    QrR { src: usize, q: Matrix },
    TriSolve { l: usize, b: usize, transposed: bool },
    Expm(usize),
    SoftmaxRows(usize),
    GaussianLogPdf { x: usize, mean: usize, std: usize },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Matrix,
}

/// Append-only record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({}x{})", self.id, self.rows, self.cols)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zeros if the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match self.adj.get(var.id).and_then(|a| a.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Matrix::zeros(r, c)
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

    pub(crate) fn push(&self, op: Op, value: Matrix) -> Var<'_> {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1, rows, cols }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// A value that receives no adjoint.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_element(1, 1, value))
    }

    pub fn value(&self, var: Var<'_>) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        ops::concat(self, parts, true)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        ops::concat(self, parts, false)
    }

    /// `Σ wᵢ xᵢ` over same-shaped inputs.
    pub fn lincomb<'t>(&'t self, terms: &[(Var<'t>, f64)]) -> Var<'t> {
        ops::lincomb(self, terms)
    }

    /// Diagonal Gaussian log density `log N(x; mean, diag(std²))`, summed over entries.
    pub fn gaussian_logpdf<'t>(&'t self, x: Var<'t>, mean: Var<'t>, std: Var<'t>) -> Var<'t> {
        ops::gaussian_logpdf(self, x, mean, std)
    }

    /// Runs the reverse sweep from a 1×1 `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(
            root.rows == 1 && root.cols == 1,
            "backward needs a scalar root, got {}x{}",
            root.rows,
            root.cols
        );
        backward::run(self, root.id)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Matrix {
        self.tape.value(*self).clone()
    }

    /// Forward value of a 1×1 var.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar var");
        self.tape.value(*self)[(0, 0)]
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        ops::matmul(self, other)
    }

    pub fn t(self) -> Var<'t> {
        ops::transpose(self)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        ops::scale(self, c)
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        ops::add_const(self, c)
    }

    pub fn mul_elem(self, other: Var<'t>) -> Var<'t> {
        ops::mul_elem(self, other)
    }

    /// Elementwise product with a constant matrix.
    pub fn mask(self, mask: Matrix) -> Var<'t> {
        ops::mask_mul(self, mask)
    }

    /// `diag(self) · mat` for a column vector `self`.
    pub fn diag_mul(self, mat: Var<'t>) -> Var<'t> {
        ops::diag_mul(self, mat)
    }

    /// Multiplies `mat` by this 1×1 var.
    pub fn scale_by(self, mat: Var<'t>) -> Var<'t> {
        ops::scale_var(self, mat)
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        ops::unary(self, kind)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Reciprocal)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn sum(self) -> Var<'t> {
        ops::sum(self)
    }

    pub fn slice(self, row: usize, col: usize, nrows: usize, ncols: usize) -> Var<'t> {
        ops::slice(self, row, col, nrows, ncols)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(self) -> Var<'t> {
        ops::diag(self)
    }

    /// Column vector to diagonal matrix.
    pub fn diag_embed(self) -> Var<'t> {
        ops::diag_embed(self)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        ops::softmax_rows(self)
    }

    pub fn cholesky(self) -> Result<Var<'t>> {
        ops::cholesky(self)
    }

    /// `R` of the thin QR decomposition (rows ≥ cols), diagonal nonnegative.
    pub fn qr_r(self) -> Var<'t> {
        ops::qr_r(self)
    }

    /// `self⁻¹ b` for lower-triangular `self`.
    pub fn tri_solve(self, b: Var<'t>) -> Result<Var<'t>> {
        ops::tri_solve(self, b, false)
    }

    /// `self⁻ᵀ b` for lower-triangular `self`.
    pub fn tri_solve_transposed(self, b: Var<'t>) -> Result<Var<'t>> {
        ops::tri_solve(self, b, true)
    }

    pub fn expm(self) -> Var<'t> {
        ops::expm(self)
    }

    pub fn is_finite(&self) -> bool {
        self.tape.value(*self).iter().all(|x| x.is_finite())
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        ops::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        ops::sub(self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

/// Square-root factor of `Σ Fᵢ Fᵢᵀ` for factors sharing a row count,
/// recorded as one QR of the stacked transposes.
pub fn reduce_sum_matrix_sqrts<'t>(factors: &[Var<'t>]) -> Var<'t> {
    let first = factors.first().expect("reduce_sum_matrix_sqrts on empty list");
    let tape = first.tape;
    let n = first.rows;
    let transposed: Vec<Var<'t>> = factors.iter().map(|f| {
        assert_eq!(f.rows, n, "sum_matrix_sqrts: factors disagree on row count");
        f.t()
    }).collect();
    let mut stacked = if transposed.len() == 1 { transposed[0] } else { tape.concat_rows(&transposed) };
    if stacked.rows < n {
        let pad = tape.constant(Matrix::zeros(n - stacked.rows, n));
        stacked = tape.concat_rows(&[stacked, pad]);
    }
    stacked.qr_r().t()
}

pub fn sum_matrix_sqrts<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    reduce_sum_matrix_sqrts(&[a, b])
}

/// Jacobian of a vector-valued function at `x`, one backward pass per output.
///
/// Values only: the passes are not themselves recorded.
pub fn jacobian_by_backward<F>(f: F, x: &Matrix) -> Matrix
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&tape, input);
    let (m, n) = (out.rows(), input.rows());
    let mut jac = Matrix::zeros(m, n);
    for i in 0..m {
        let pick = out.slice(i, 0, 1, 1);
        let g = tape.backward(pick);
        jac.row_mut(i).copy_from(&g.wrt(input).transpose());
    }
    jac
}

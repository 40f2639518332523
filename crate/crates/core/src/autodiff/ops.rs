use crate::error::Result;
use crate::linalg::{self, Matrix};

use super::{Op, Tape, Unary, Var};

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "inverse_softplus needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn same_tape<'t>(a: Var<'t>, b: Var<'t>) {
    debug_assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

fn check_same_shape(op: &str, a: Var<'_>, b: Var<'_>) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

pub(super) fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    same_tape(a, b);
    assert_eq!(a.cols, b.rows, "matmul: {:?} x {:?}", a.shape(), b.shape());
    let value = {
        let nodes = a.tape.nodes();
        &nodes[a.id].value * &nodes[b.id].value
    };
    a.tape.push(Op::MatMul(a.id, b.id), value)
}

pub(super) fn add<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    same_tape(a, b);
    check_same_shape("add", a, b);
    let value = {
        let nodes = a.tape.nodes();
        &nodes[a.id].value + &nodes[b.id].value
    };
    a.tape.push(Op::Add(a.id, b.id), value)
}

pub(super) fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    same_tape(a, b);
    check_same_shape("sub", a, b);
    let value = {
        let nodes = a.tape.nodes();
        &nodes[a.id].value - &nodes[b.id].value
    };
    a.tape.push(Op::Sub(a.id, b.id), value)
}

pub(super) fn scale(a: Var<'_>, c: f64) -> Var<'_> {
    let value = &a.tape.nodes()[a.id].value * c;
    a.tape.push(Op::Scale(a.id, c), value)
}

pub(super) fn add_const(a: Var<'_>, c: f64) -> Var<'_> {
    let value = a.tape.nodes()[a.id].value.add_scalar(c);
    a.tape.push(Op::AddConst(a.id), value)
}

pub(super) fn mul_elem<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    same_tape(a, b);
    check_same_shape("mul_elem", a, b);
    let value = {
        let nodes = a.tape.nodes();
        nodes[a.id].value.component_mul(&nodes[b.id].value)
    };
    a.tape.push(Op::MulElem(a.id, b.id), value)
}

pub(super) fn mask_mul(a: Var<'_>, mask: Matrix) -> Var<'_> {
    assert_eq!(a.shape(), mask.shape(), "mask: shape mismatch");
    let value = a.tape.nodes()[a.id].value.component_mul(&mask);
    a.tape.push(Op::MaskMul(a.id, mask), value)
}

pub(super) fn diag_mul<'t>(d: Var<'t>, m: Var<'t>) -> Var<'t> {
    same_tape(d, m);
    assert!(d.cols == 1 && d.rows == m.rows, "diag_mul: {:?} with {:?}", d.shape(), m.shape());
    let value = {
        let nodes = d.tape.nodes();
        let dv = &nodes[d.id].value;
        let mut out = nodes[m.id].value.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= dv[(i, 0)];
        }
        out
    };
    d.tape.push(Op::DiagMul { diag: d.id, mat: m.id }, value)
}

pub(super) fn scale_var<'t>(s: Var<'t>, m: Var<'t>) -> Var<'t> {
    same_tape(s, m);
    assert_eq!(s.shape(), (1, 1), "scale_by: scalar must be 1x1");
    let value = {
        let nodes = s.tape.nodes();
        &nodes[m.id].value * nodes[s.id].value[(0, 0)]
    };
    s.tape.push(Op::ScaleVar { scalar: s.id, mat: m.id }, value)
}

pub(super) fn lincomb<'t>(tape: &'t Tape, terms: &[(Var<'t>, f64)]) -> Var<'t> {
    let (first, _) = terms.first().expect("lincomb of no terms");
    let value = {
        let nodes = tape.nodes();
        let mut acc = Matrix::zeros(first.rows, first.cols);
        for (v, w) in terms {
            check_same_shape("lincomb", *first, *v);
            acc += &nodes[v.id].value * *w;
        }
        acc
    };
    tape.push(Op::LinComb(terms.iter().map(|(v, w)| (v.id, *w)).collect()), value)
}

pub(super) fn transpose(a: Var<'_>) -> Var<'_> {
    let value = a.tape.nodes()[a.id].value.transpose();
    a.tape.push(Op::Transpose(a.id), value)
}

pub(super) fn unary(a: Var<'_>, kind: Unary) -> Var<'_> {
    let value = {
        let nodes = a.tape.nodes();
        let x = &nodes[a.id].value;
        match kind {
            Unary::Tanh => x.map(f64::tanh),
            Unary::Softplus => x.map(softplus),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => x.map(f64::ln),
            Unary::Square => x.map(|v| v * v),
            Unary::Reciprocal => x.map(|v| 1.0 / v),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Neg => -x,
        }
    };
    a.tape.push(Op::Unary(a.id, kind), value)
}

pub(super) fn sum(a: Var<'_>) -> Var<'_> {
    let s = a.tape.nodes()[a.id].value.sum();
    a.tape.push(Op::Sum(a.id), Matrix::from_element(1, 1, s))
}

pub(super) fn concat<'t>(tape: &'t Tape, parts: &[Var<'t>], rows: bool) -> Var<'t> {
    let first = parts.first().expect("concat of no parts");
    let value = {
        let nodes = tape.nodes();
        if rows {
            let cols = first.cols;
            let total: usize = parts.iter().map(|p| p.rows).sum();
            let mut out = Matrix::zeros(total, cols);
            let mut off = 0;
            for p in parts {
                assert_eq!(p.cols, cols, "concat_rows: column mismatch");
                out.rows_mut(off, p.rows).copy_from(&nodes[p.id].value);
                off += p.rows;
            }
            out
        } else {
            let rows_n = first.rows;
            let total: usize = parts.iter().map(|p| p.cols).sum();
            let mut out = Matrix::zeros(rows_n, total);
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows_n, "concat_cols: row mismatch");
                out.columns_mut(off, p.cols).copy_from(&nodes[p.id].value);
                off += p.cols;
            }
            out
        }
    };
    let ids = parts.iter().map(|p| p.id).collect();
    tape.push(if rows { Op::ConcatRows(ids) } else { Op::ConcatCols(ids) }, value)
}

pub(super) fn slice(a: Var<'_>, row: usize, col: usize, nrows: usize, ncols: usize) -> Var<'_> {
    assert!(
        row + nrows <= a.rows && col + ncols <= a.cols,
        "slice ({row},{col})+({nrows}x{ncols}) out of {:?}",
        a.shape()
    );
    let value = a.tape.nodes()[a.id].value.view((row, col), (nrows, ncols)).into_owned();
    a.tape.push(Op::Slice { src: a.id, row, col }, value)
}

pub(super) fn diag(a: Var<'_>) -> Var<'_> {
    assert_eq!(a.rows, a.cols, "diag needs a square matrix");
    let value = {
        let nodes = a.tape.nodes();
        Matrix::from_column_slice(a.rows, 1, nodes[a.id].value.diagonal().as_slice())
    };
    a.tape.push(Op::Diag(a.id), value)
}

pub(super) fn diag_embed(a: Var<'_>) -> Var<'_> {
    assert_eq!(a.cols, 1, "diag_embed needs a column vector");
    let value = {
        let nodes = a.tape.nodes();
        Matrix::from_diagonal(&nodes[a.id].value.column(0).into_owned())
    };
    a.tape.push(Op::DiagEmbed(a.id), value)
}

pub(super) fn softmax_rows(a: Var<'_>) -> Var<'_> {
    let value = {
        let mut x = a.tape.nodes()[a.id].value.clone();
        for mut row in x.row_iter_mut() {
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let s = row.sum();
            row /= s;
        }
        x
    };
    a.tape.push(Op::SoftmaxRows(a.id), value)
}

pub(super) fn cholesky(a: Var<'_>) -> Result<Var<'_>> {
    let value = linalg::cholesky(&a.tape.nodes()[a.id].value)?.into_inner();
    Ok(a.tape.push(Op::Cholesky(a.id), value))
}

pub(super) fn qr_r(a: Var<'_>) -> Var<'_> {
    assert!(a.rows >= a.cols, "qr_r needs rows >= cols, got {:?}", a.shape());
    let (q, r) = linalg::householder_qr(&a.tape.nodes()[a.id].value);
    a.tape.push(Op::QrR { src: a.id, q }, r)
}

pub(super) fn tri_solve<'t>(l: Var<'t>, b: Var<'t>, transposed: bool) -> Result<Var<'t>> {
    same_tape(l, b);
    let value = {
        let nodes = l.tape.nodes();
        if transposed {
            linalg::tri_solve_transposed(&nodes[l.id].value, &nodes[b.id].value)?
        } else {
            linalg::tri_solve(&nodes[l.id].value, &nodes[b.id].value)?
        }
    };
    Ok(l.tape.push(Op::TriSolve { l: l.id, b: b.id, transposed }, value))
}

pub(super) fn expm(a: Var<'_>) -> Var<'_> {
    let value = linalg::matrix_exponential(&a.tape.nodes()[a.id].value);
    a.tape.push(Op::Expm(a.id), value)
}

pub(super) fn gaussian_logpdf<'t>(tape: &'t Tape, x: Var<'t>, mean: Var<'t>, std: Var<'t>) -> Var<'t> {
    check_same_shape("gaussian_logpdf", x, mean);
    check_same_shape("gaussian_logpdf", x, std);
    let value = {
        let nodes = tape.nodes();
        let (xv, mv, sv) = (&nodes[x.id].value, &nodes[mean.id].value, &nodes[std.id].value);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut lp = 0.0;
        for i in 0..xv.len() {
            let z = (xv[i] - mv[i]) / sv[i];
            lp += -0.5 * z * z - sv[i].ln() - half_log_2pi;
        }
        lp
    };
    tape.push(
        Op::GaussianLogPdf { x: x.id, mean: mean.id, std: std.id },
        Matrix::from_element(1, 1, value),
    )
}

use crate::linalg::{self, Matrix};

use super::{ops::sigmoid, Gradients, Op, Tape, Unary};

fn accumulate(adj: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut adj[id] {
        Some(acc) => *acc += g,
        slot @ None => *slot = Some(g),
    }
}

/// Lower triangle including the diagonal.
fn tril(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in 0..j.min(m.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Lower triangle with the diagonal halved.
fn phi(m: &Matrix) -> Matrix {
    let mut out = tril(m);
    for i in 0..m.nrows().min(m.ncols()) {
        out[(i, i)] *= 0.5;
    }
    out
}

/// Symmetric matrix built from the lower triangle of `m`.
fn copyltu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in 0..j {
            out[(i, j)] = m[(j, i)];
        }
    }
    out
}

// Unchecked substitutions: a singular factor yields non-finite adjoints,
// which callers detect through the gradient norm.
fn lower_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

fn lower_t_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

pub(super) fn run(tape: &Tape, root: usize) -> Gradients {
    let nodes = tape.nodes();
    let mut adj: Vec<Option<Matrix>> = vec![None; root + 1];
    adj[root] = Some(Matrix::from_element(1, 1, 1.0));

    for id in (0..=root).rev() {
        let node = &nodes[id];
        let g = match &node.op {
            Op::Leaf => continue,
            Op::Constant => {
                adj[id] = None;
                continue;
            }
            _ => match adj[id].take() {
                Some(g) => g,
                None => continue,
            },
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                accumulate(&mut adj, *a, &g * bv.transpose());
                accumulate(&mut adj, *b, av.transpose() * &g);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj, *a, g.clone());
                accumulate(&mut adj, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj, *a, g.clone());
                accumulate(&mut adj, *b, -g);
            }
            Op::Scale(a, c) => accumulate(&mut adj, *a, g * *c),
            Op::AddConst(a) => accumulate(&mut adj, *a, g),
            Op::MulElem(a, b) => {
                let ga = g.component_mul(&nodes[*b].value);
                let gb = g.component_mul(&nodes[*a].value);
                accumulate(&mut adj, *a, ga);
                accumulate(&mut adj, *b, gb);
            }
            Op::MaskMul(a, mask) => accumulate(&mut adj, *a, g.component_mul(mask)),
            Op::DiagMul { diag, mat } => {
                let d = &nodes[*diag].value;
                let m = &nodes[*mat].value;
                let mut gm = g.clone();
                let mut gd = Matrix::zeros(d.nrows(), 1);
                for i in 0..m.nrows() {
                    gd[(i, 0)] = g.row(i).dot(&m.row(i));
                    gm.row_mut(i).scale_mut(d[(i, 0)]);
                }
                accumulate(&mut adj, *diag, gd);
                accumulate(&mut adj, *mat, gm);
            }
            Op::ScaleVar { scalar, mat } => {
                let s = nodes[*scalar].value[(0, 0)];
                let m = &nodes[*mat].value;
                accumulate(&mut adj, *scalar, Matrix::from_element(1, 1, g.dot(m)));
                accumulate(&mut adj, *mat, g * s);
            }
            Op::LinComb(terms) => {
                for (v, w) in terms {
                    accumulate(&mut adj, *v, &g * *w);
                }
            }
            Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
            Op::Unary(a, kind) => {
                let x = &nodes[*a].value;
                let local = match kind {
                    Unary::Tanh => out.map(|t| 1.0 - t * t),
                    Unary::Softplus => x.map(sigmoid),
                    Unary::Sigmoid => out.map(|s| s * (1.0 - s)),
                    Unary::Exp => out.clone(),
                    Unary::Log => x.map(|v| 1.0 / v),
                    Unary::Square => x * 2.0,
                    Unary::Reciprocal => out.map(|r| -r * r),
                    Unary::Sqrt => out.map(|s| 0.5 / s),
                    Unary::Neg => {
                        accumulate(&mut adj, *a, -g);
                        continue;
                    }
                };
                accumulate(&mut adj, *a, g.component_mul(&local));
            }
            Op::Sum(a) => {
                let (r, c) = nodes[*a].value.shape();
                accumulate(&mut adj, *a, Matrix::from_element(r, c, g[(0, 0)]));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = nodes[*p].value.shape();
                    accumulate(&mut adj, *p, g.view((off, 0), (r, c)).into_owned());
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = nodes[*p].value.shape();
                    accumulate(&mut adj, *p, g.view((0, off), (r, c)).into_owned());
                    off += c;
                }
            }
            Op::Slice { src, row, col } => {
                let (r, c) = nodes[*src].value.shape();
                let mut full = Matrix::zeros(r, c);
                full.view_mut((*row, *col), g.shape()).copy_from(&g);
                accumulate(&mut adj, *src, full);
            }
            Op::Diag(a) => {
                let n = g.nrows();
                let mut full = Matrix::zeros(n, n);
                for i in 0..n {
                    full[(i, i)] = g[(i, 0)];
                }
                accumulate(&mut adj, *a, full);
            }
            Op::DiagEmbed(a) => {
                let n = g.nrows();
                accumulate(&mut adj, *a, Matrix::from_fn(n, 1, |i, _| g[(i, i)]));
            }
            Op::Cholesky(a) => {
                // Σ̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)
                let l = out;
                let inner = phi(&(l.transpose() * &g));
                let y = lower_t_solve(l, &inner);
                let s = lower_t_solve(l, &y.transpose()).transpose();
                accumulate(&mut adj, *a, (&s + s.transpose()) * 0.5);
            }
            Op::QrR { src, q } => {
                // Ā = Q copyltu(R R̄ᵀ) R⁻ᵀ, with no adjoint flowing into Q.
                let r = out;
                let m = r * g.transpose();
                let b = q * copyltu(&m);
                // B R⁻ᵀ = (R⁻¹ Bᵀ)ᵀ and R = (Rᵀ)ᵀ with Rᵀ lower.
                let rt = r.transpose();
                accumulate(&mut adj, *src, lower_t_solve(&rt, &b.transpose()).transpose());
            }
            Op::TriSolve { l, b, transposed } => {
                let lv = &nodes[*l].value;
                if *transposed {
                    let gb = lower_solve(lv, &g);
                    accumulate(&mut adj, *l, -tril(&(out * gb.transpose())));
                    accumulate(&mut adj, *b, gb);
                } else {
                    let gb = lower_t_solve(lv, &g);
                    accumulate(&mut adj, *l, -tril(&(&gb * out.transpose())));
                    accumulate(&mut adj, *b, gb);
                }
            }
            Op::Expm(a) => {
                // Adjoint of the Fréchet derivative: upper-right block of
                // exp([[Aᵀ, Ḡ], [0, Aᵀ]]).
                let at = nodes[*a].value.transpose();
                let n = at.nrows();
                let mut block = Matrix::zeros(2 * n, 2 * n);
                block.view_mut((0, 0), (n, n)).copy_from(&at);
                block.view_mut((n, n), (n, n)).copy_from(&at);
                block.view_mut((0, n), (n, n)).copy_from(&g);
                let e = linalg::matrix_exponential(&block);
                accumulate(&mut adj, *a, e.view((0, n), (n, n)).into_owned());
            }
            Op::SoftmaxRows(a) => {
                let mut gx = out.component_mul(&g);
                for i in 0..gx.nrows() {
                    let s = gx.row(i).sum();
                    for j in 0..gx.ncols() {
                        gx[(i, j)] -= out[(i, j)] * s;
                    }
                }
                accumulate(&mut adj, *a, gx);
            }
            Op::GaussianLogPdf { x, mean, std } => {
                let up = g[(0, 0)];
                let (xv, mv, sv) = (&nodes[*x].value, &nodes[*mean].value, &nodes[*std].value);
                let (r, c) = xv.shape();
                let mut gx = Matrix::zeros(r, c);
                let mut gs = Matrix::zeros(r, c);
                for i in 0..xv.len() {
                    let z = (xv[i] - mv[i]) / sv[i];
                    gx[i] = -up * z / sv[i];
                    gs[i] = up * (z * z - 1.0) / sv[i];
                }
                accumulate(&mut adj, *mean, -&gx);
                accumulate(&mut adj, *x, gx);
                accumulate(&mut adj, *std, gs);
            }
        }
    }
    let shapes = nodes.iter().map(|n| n.value.shape()).collect();
    Gradients { adj, shapes }
}

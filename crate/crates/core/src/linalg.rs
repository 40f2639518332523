//! Dense kernels for square-root covariance arithmetic.
//!
//! Every triangular factor produced here follows one sign convention: the
//! diagonal is nonnegative. Two factors of the same covariance are therefore
//! equal entry by entry, not just up to column signs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Pivots below `-PSD_TOLERANCE * ||m||_F` are treated as genuine indefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-12;
/// Relative Frobenius asymmetry accepted by [`cholesky`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Smallest diagonal magnitude accepted by the triangular solvers.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Lower-triangular square-root factor with a nonnegative diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(Matrix);

impl LowerTriangular {
    /// Wraps `m` after checking squareness, a zero strict upper triangle, and
    /// a nonnegative diagonal.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch {
                op: "LowerTriangular::new",
                detail: format!("expected square, got {}x{}", m.nrows(), m.ncols()),
            });
        }
        let n = m.nrows();
        for j in 0..n {
            for i in 0..j {
                if m[(i, j)] != 0.0 {
                    return Err(Error::ShapeMismatch {
                        op: "LowerTriangular::new",
                        detail: format!("nonzero upper entry at ({i}, {j})"),
                    });
                }
            }
            if m[(j, j)] < 0.0 {
                return Err(Error::ShapeMismatch {
                    op: "LowerTriangular::new",
                    detail: format!("negative diagonal at {j}"),
                });
            }
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = d.abs();
        }
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// L Lᵀ.
    pub fn covariance(&self) -> Matrix {
        &self.0 * self.0.transpose()
    }
}

impl AsRef<Matrix> for LowerTriangular {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cholesky factor of a symmetric positive semi-definite matrix.
///
/// Zero (or roundoff-negative) pivots produce a zero column, so singular PSD
/// inputs still factor.
pub fn cholesky(m: &Matrix) -> Result<LowerTriangular> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            detail: format!("expected square, got {}x{}", m.nrows(), m.ncols()),
        });
    }
    let norm = frobenius(m);
    let asym = frobenius(&(m - m.transpose()));
    if asym > SYMMETRY_TOLERANCE * norm {
        return Err(Error::Asymmetric { asymmetry: asym / norm.max(f64::MIN_POSITIVE) });
    }
    let n = m.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot < -PSD_TOLERANCE * norm {
            return Err(Error::NotPositiveSemiDefinite { index: j, pivot });
        }
        if pivot <= 0.0 {
            continue;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(LowerTriangular(l))
}

/// Thin Householder QR of `a` (rows ≥ cols): returns `(Q, R)` with `Q` of
/// shape rows×cols and `R` upper triangular with a nonnegative diagonal.
///
/// Inputs with fewer rows than columns are padded with zero rows first, so
/// `Q` then has `cols` rows.
pub fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = a.shape();
    let mut work = if rows < cols {
        let mut padded = Matrix::zeros(cols, cols);
        padded.rows_mut(0, rows).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let r_rows = work.nrows();
    let mut reflectors: Vec<(usize, Vec<f64>, f64)> = Vec::with_capacity(cols);

    for k in 0..cols {
        let norm = (k..r_rows).map(|i| work[(i, k)] * work[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = work[(k, k)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..r_rows).map(|i| work[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        for j in k..cols {
            let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * work[(k + i, j)]).sum();
            let s = beta * dot;
            for (i, vi) in v.iter().enumerate() {
                work[(k + i, j)] -= s * vi;
            }
        }
        reflectors.push((k, v, beta));
    }

    let mut r = Matrix::zeros(cols, cols);
    for j in 0..cols {
        for i in 0..=j {
            r[(i, j)] = work[(i, j)];
        }
    }

    let mut q = Matrix::zeros(r_rows, cols);
    for i in 0..cols {
        q[(i, i)] = 1.0;
    }
    for (k, v, beta) in reflectors.iter().rev() {
        for j in 0..cols {
            let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * q[(k + i, j)]).sum();
            let s = beta * dot;
            for (i, vi) in v.iter().enumerate() {
                q[(k + i, j)] -= s * vi;
            }
        }
    }

    for i in 0..cols {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// Upper-triangular `R` of `a = QR`, diagonal nonnegative.
pub fn qr_r_factor(a: &Matrix) -> Matrix {
    householder_qr(a).1
}

/// Square-root factor of `A + B` from factors of `A` and `B`, obtained from
/// the QR decomposition of the stacked transpose `[A½ B½]ᵀ`.
pub fn sum_matrix_sqrts(a_sqrt: &Matrix, b_sqrt: &Matrix) -> Result<LowerTriangular> {
    reduce_sum_matrix_sqrts(&[a_sqrt.clone(), b_sqrt.clone()])
}

/// Square-root factor of `Σ Fᵢ Fᵢᵀ` for a list of (possibly rectangular)
/// factors sharing a row count. The whole list is stacked into one QR, which
/// gives the same canonical factor as folding pairwise.
pub fn reduce_sum_matrix_sqrts(factors: &[Matrix]) -> Result<LowerTriangular> {
    let first = factors.first().ok_or(Error::Empty("reduce_sum_matrix_sqrts factors"))?;
    let n = first.nrows();
    if let Some(bad) = factors.iter().find(|f| f.nrows() != n) {
        return Err(Error::ShapeMismatch {
            op: "sum_matrix_sqrts",
            detail: format!("row counts {} and {}", n, bad.nrows()),
        });
    }
    let total: usize = factors.iter().map(|f| f.ncols()).sum();
    let mut stacked = Matrix::zeros(total, n);
    let mut offset = 0;
    for f in factors {
        stacked.rows_mut(offset, f.ncols()).copy_from(&f.transpose());
        offset += f.ncols();
    }
    Ok(LowerTriangular(qr_r_factor(&stacked).transpose()))
}

/// Numerators/denominators of the degree-13 Padé approximant to `exp`.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &Matrix) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Number of squarings used by [`matrix_exponential`] for `a`.
pub fn expm_squarings(a: &Matrix) -> u32 {
    let norm = one_norm(a);
    if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    } else {
        0
    }
}

fn pade13(a: &Matrix) -> Matrix {
    let n = a.nrows();
    let b = &PADE13;
    let ident = Matrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (b[13] * &a6 + b[11] * &a4 + b[9] * &a2)
        + b[7] * &a6
        + b[5] * &a4
        + b[3] * &a2
        + b[1] * &ident;
    let u = a * u_inner;
    let v = &a6 * (b[12] * &a6 + b[10] * &a4 + b[8] * &a2)
        + b[6] * &a6
        + b[4] * &a4
        + b[2] * &a2
        + b[0] * &ident;
    let p = &v + &u;
    let q = &v - &u;
    q.lu().solve(&p).expect("Padé denominator is nonsingular for scaled arguments")
}

/// `exp(a)` by scaling and squaring around a fixed degree-13 Padé approximant.
pub fn matrix_exponential(a: &Matrix) -> Matrix {
    assert!(a.is_square(), "matrix_exponential needs a square matrix");
    if a.nrows() == 0 {
        return a.clone();
    }
    let s = expm_squarings(a);
    let scaled = a / 2f64.powi(s as i32);
    let mut e = pade13(&scaled);
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

fn start_vector(n: usize) -> nalgebra::DVector<f64> {
    // Deterministic, with no zero or repeated entries.
    let v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    let norm = v.norm();
    v / norm
}

/// Largest singular value by power iteration on `aᵀa`.
pub fn spectral_norm(a: &Matrix, iters: usize) -> f64 {
    assert!(iters >= 1, "spectral_norm needs at least one iteration");
    if a.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    let mut v = start_vector(a.ncols());
    let mut sigma = 0.0;
    for _ in 0..iters {
        let av = a * &v;
        sigma = av.norm();
        let w = a.transpose() * av;
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
    }
    sigma.max((a * &v).norm())
}

/// One or more rounds of the two-sided power iteration used for spectral
/// normalization. Updates `u` (rows) and `v` (cols) in place and returns
/// `uᵀ a v`.
pub fn power_iteration(a: &Matrix, u: &mut Matrix, v: &mut Matrix, iters: usize) -> f64 {
    const EPS: f64 = 1e-12;
    for _ in 0..iters {
        let nv = a.transpose() * &*u;
        *v = &nv / nv.norm().max(EPS);
        let nu = a * &*v;
        *u = &nu / nu.norm().max(EPS);
    }
    (u.transpose() * a * &*v)[(0, 0)]
}

/// Runs at least `min_iters` rounds of [`power_iteration`], then continues
/// until the estimate stops changing (relative 1e-13, capped at 10⁵ rounds).
pub fn power_iteration_converged(a: &Matrix, u: &mut Matrix, v: &mut Matrix, min_iters: usize) -> f64 {
    let mut sigma = power_iteration(a, u, v, min_iters.max(1));
    for _ in 0..100_000 {
        let next = power_iteration(a, u, v, 1);
        if (next - sigma).abs() <= 1e-13 * next.abs().max(1e-300) {
            return next;
        }
        sigma = next;
    }
    sigma
}

fn check_solve_shapes(l: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if !l.is_square() || l.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("factor {}x{}, rhs {}x{}", l.nrows(), l.ncols(), b.nrows(), b.ncols()),
        });
    }
    for i in 0..l.nrows() {
        if l[(i, i)].abs() <= SINGULAR_TOLERANCE {
            return Err(Error::SingularFactor { index: i, value: l[(i, i)] });
        }
    }
    Ok(())
}

/// Solves `l x = b` by forward substitution. Only the lower triangle of `l`
/// is read.
pub fn tri_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_solve_shapes(l, b, "tri_solve")?;
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
    Ok(x)
}

/// Solves `lᵀ x = b` by back substitution. Only the lower triangle of `l`
/// is read.
pub fn tri_solve_transposed(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_solve_shapes(l, b, "tri_solve_transposed")?;
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
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        frobenius(&(a - b)) / frobenius(b).max(1e-300)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cholesky_examples() {
        let i2 = Matrix::identity(2, 2);
        assert_eq!(cholesky(&i2).unwrap().as_matrix(), &i2);
        let l = cholesky(&m(2, 2, &[2.0, 1.0, 1.0, 3.0])).unwrap();
        // hand recursion: l11 = √2, l21 = 1/√2, l22 = √(3 − 1/2)
        let expected = m(2, 2, &[2f64.sqrt(), 0.0, 0.5f64.sqrt(), 2.5f64.sqrt()]);
        assert_relative_eq!(l.as_matrix(), &expected, epsilon = 1e-14);
        assert_relative_eq!(l.as_matrix()[(1, 1)], 1.58114, epsilon = 1e-5);
        assert_eq!(cholesky(&m(1, 1, &[4.0])).unwrap().as_matrix()[(0, 0)], 2.0);
    }

    #[test]
    fn cholesky_rejects_bad_input() {
        assert!(matches!(
            cholesky(&m(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            Err(Error::NotPositiveSemiDefinite { .. })
        ));
        assert!(matches!(cholesky(&m(2, 2, &[1.0, 0.5, 0.0, 1.0])), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn cholesky_accepts_singular_psd() {
        let l = cholesky(&m(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_relative_eq!(l.covariance(), m(2, 2, &[1.0, 1.0, 1.0, 1.0]), epsilon = 1e-14);
        assert_eq!(l.as_matrix()[(1, 1)], 0.0);
    }

    #[test]
    fn qr_examples() {
        let i3 = Matrix::identity(3, 3);
        assert_eq!(qr_r_factor(&i3), i3);
        assert_eq!(qr_r_factor(&m(2, 1, &[0.0, 1.0])), m(1, 1, &[1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 2);
        let (q, r) = householder_qr(&a);
        // Gram-matrix oracle: RᵀR = AᵀA.
        assert!(rel_err(&(r.transpose() * &r), &(a.transpose() * &a)) < 1e-12);
        assert!(frobenius(&(q.transpose() * &q - Matrix::identity(2, 2))) < 1e-10);
        assert!(rel_err(&(&q * &r), &a) < 1e-12);
        assert!(r[(0, 0)] >= 0.0 && r[(1, 1)] >= 0.0 && r[(1, 0)] == 0.0);
    }

    #[test]
    fn qr_wide_input_is_padded() {
        let a = m(1, 3, &[1.0, 2.0, 2.0]);
        let r = qr_r_factor(&a);
        assert_eq!(r.shape(), (3, 3));
        assert!(rel_err(&(r.transpose() * &r), &(a.transpose() * &a)) < 1e-12);
    }

    #[test]
    fn sum_sqrts_examples() {
        let i2 = Matrix::identity(2, 2);
        let z2 = Matrix::zeros(2, 2);
        assert_relative_eq!(sum_matrix_sqrts(&i2, &z2).unwrap().as_matrix(), &i2, epsilon = 1e-15);
        let b = m(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let l = sum_matrix_sqrts(&i2, &b).unwrap();
        let chol = cholesky(&m(2, 2, &[2.0, 1.0, 1.0, 3.0])).unwrap();
        assert_relative_eq!(l.as_matrix(), chol.as_matrix(), epsilon = 1e-14);
        let swapped = sum_matrix_sqrts(&b, &i2).unwrap();
        assert_relative_eq!(swapped.as_matrix(), l.as_matrix(), epsilon = 1e-14);
        assert!(sum_matrix_sqrts(&i2, &Matrix::identity(3, 3)).is_err());
    }

    #[test]
    fn reduce_examples() {
        let i2 = Matrix::identity(2, 2);
        assert_relative_eq!(reduce_sum_matrix_sqrts(&[i2.clone()]).unwrap().as_matrix(), &i2, epsilon = 1e-15);
        let i1 = Matrix::identity(1, 1);
        let l = reduce_sum_matrix_sqrts(&[i1.clone(), i1.clone(), i1.clone(), i1]).unwrap();
        assert_relative_eq!(l.as_matrix()[(0, 0)], 2.0, epsilon = 1e-15);
        assert!(matches!(reduce_sum_matrix_sqrts(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn reduce_matches_pairwise_fold_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fs: Vec<Matrix> = (0..5).map(|i| random(&mut rng, 3, 1 + i % 3)).collect();
        let stacked = reduce_sum_matrix_sqrts(&fs).unwrap();
        let mut acc = fs[0].clone();
        for f in &fs[1..] {
            acc = sum_matrix_sqrts(&acc, f).unwrap().into_inner();
        }
        assert!(rel_err(stacked.as_matrix(), &acc) < 1e-8);
        let mut rev = fs.clone();
        rev.reverse();
        let reversed = reduce_sum_matrix_sqrts(&rev).unwrap();
        assert!(rel_err(&reversed.covariance(), &stacked.covariance()) < 1e-8);
    }

    #[test]
    fn expm_examples() {
        let z = Matrix::zeros(3, 3);
        assert_eq!(matrix_exponential(&z), Matrix::identity(3, 3));
        let nil = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(matrix_exponential(&nil), m(2, 2, &[1.0, 1.0, 0.0, 1.0]), epsilon = 1e-15);
        let h = std::f64::consts::FRAC_PI_2;
        let rot = matrix_exponential(&m(2, 2, &[0.0, -h, h, 0.0]));
        assert_relative_eq!(rot, m(2, 2, &[0.0, -1.0, 1.0, 0.0]), epsilon = 1e-9);
    }

    #[test]
    fn expm_large_norm_uses_squaring() {
        // diag(-8, 3): closed form is elementwise exp.
        let a = m(2, 2, &[-8.0, 0.0, 0.0, 3.0]);
        assert!(expm_squarings(&a) > 0);
        let e = matrix_exponential(&a);
        assert_relative_eq!(e[(0, 0)], (-8f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(e[(1, 1)], 3f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn expm_matches_taylor_series_on_random_input() {
        // Oracle: plain Taylor series with many terms on a modest norm.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 4, 4) * 1.5;
        let mut term = Matrix::identity(4, 4);
        let mut sum = term.clone();
        for k in 1..80 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        assert!(rel_err(&matrix_exponential(&a), &sum) < 1e-12);
    }

    #[test]
    fn spectral_norm_examples() {
        assert_relative_eq!(spectral_norm(&m(2, 2, &[3.0, 0.0, 0.0, 1.0]), 50), 3.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_norm(&Matrix::identity(3, 3), 50), 1.0, epsilon = 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(2, 3), 10), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 3, 3);
        let svd_max = a.clone().svd(false, false).singular_values.max();
        assert_relative_eq!(spectral_norm(&a, 200), svd_max, max_relative = 1e-6);
    }

    #[test]
    fn tri_solve_examples() {
        let b = m(2, 1, &[2.0, 2.0]);
        assert_eq!(tri_solve(&Matrix::identity(2, 2), &b).unwrap(), b);
        let l = m(2, 2, &[2.0, 0.0, 1.0, 1.0]);
        let x = tri_solve(&l, &b).unwrap();
        assert_relative_eq!(x, m(2, 1, &[1.0, 1.0]), epsilon = 1e-15);
        assert_relative_eq!(&l * &x, b, epsilon = 1e-14);
        let xt = tri_solve_transposed(&l, &b).unwrap();
        assert_relative_eq!(l.transpose() * xt, b, epsilon = 1e-14);
        assert!(matches!(
            tri_solve(&m(2, 2, &[1.0, 0.0, 1.0, 0.0]), &b),
            Err(Error::SingularFactor { index: 1, .. })
        ));
    }

    fn factor_strategy(n: usize) -> impl Strategy<Value = Matrix> {
        (1usize..5).prop_flat_map(move |c| {
            proptest::collection::vec(-2.0f64..2.0, n * c).prop_map(move |d| Matrix::from_vec(n, c, d))
        })
    }

    proptest! {
        #[test]
        fn sum_sqrts_reconstructs_sum(
            (a, b) in (1usize..5).prop_flat_map(|n| (factor_strategy(n), factor_strategy(n)))
        ) {
            let l = sum_matrix_sqrts(&a, &b).unwrap();
            let target = &a * a.transpose() + &b * b.transpose();
            prop_assume!(frobenius(&target) > 1e-8);
            prop_assert!(rel_err(&l.covariance(), &target) <= 1e-9);
            for i in 0..l.dim() {
                prop_assert!(l.as_matrix()[(i, i)] >= 0.0);
            }
        }

        #[test]
        fn cholesky_inverts_outer_product(d in proptest::collection::vec(0.1f64..2.0, 3), off in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let l = m(3, 3, &[d[0], 0.0, 0.0, off[0], d[1], 0.0, off[1], off[2], d[2]]);
            let back = cholesky(&(&l * l.transpose())).unwrap();
            prop_assert!(rel_err(back.as_matrix(), &l) <= 1e-9);
        }

        #[test]
        fn expm_of_commuting_diagonals_multiplies(a in proptest::collection::vec(-2.0f64..2.0, 3), b in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let da = Matrix::from_diagonal(&nalgebra::DVector::from_vec(a));
            let db = Matrix::from_diagonal(&nalgebra::DVector::from_vec(b));
            let lhs = matrix_exponential(&(&da + &db));
            let rhs = matrix_exponential(&da) * matrix_exponential(&db);
            prop_assert!(rel_err(&lhs, &rhs) <= 1e-12);
        }

        #[test]
        fn spectral_norm_is_absolutely_homogeneous(data in proptest::collection::vec(-1.0f64..1.0, 6), c in -5.0f64..5.0) {
            let a = Matrix::from_vec(2, 3, data);
            let base = spectral_norm(&a, 200);
            prop_assume!(base > 1e-6);
            let scaled = spectral_norm(&(&a * c), 200);
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-6 * c.abs().max(1e-12) * base);
        }
    }
}

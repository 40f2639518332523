//! Covariance-form Kalman filter and RTS smoother for linear-Gaussian
//! models, written without square roots or autodiff. These are the oracles
//! the square-root implementations are validated against.

use crate::linalg::{self, Matrix};

/// `dz = F z dt + dB` with `Cov(dB) = Q dt`, observed as `a = H z + N(0, R)`.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub f: Matrix,
    pub q: Matrix,
    pub h: Matrix,
    pub r: Matrix,
    pub mu0: Matrix,
    pub sigma0: Matrix,
}

impl LinearGaussian {
    pub fn scalar(f: f64, q: f64, r: f64, mu0: f64, sigma0: f64) -> Self {
        let one = |v: f64| Matrix::from_element(1, 1, v);
        Self { f: one(f), q: one(q), h: one(1.0), r: one(r), mu0: one(mu0), sigma0: one(sigma0) }
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }
}

/// Exact discretization over `dt`: `(e^{F dt}, ∫₀^dt e^{Fs} Q e^{Fᵀs} ds)`.
pub fn discretize(f: &Matrix, q: &Matrix, dt: f64) -> (Matrix, Matrix) {
    let n = f.nrows();
    let mut block = Matrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(f);
    block.view_mut((0, n), (n, n)).copy_from(q);
    block.view_mut((n, n), (n, n)).copy_from(&(-f.transpose()));
    let e = linalg::matrix_exponential(&(block * dt));
    let phi = e.view((0, 0), (n, n)).into_owned();
    let qd = e.view((0, n), (n, n)).into_owned() * phi.transpose();
    let qd = (&qd + qd.transpose()) * 0.5;
    (phi, qd)
}

fn inverse(m: &Matrix) -> Matrix {
    m.clone().try_inverse().expect("oracle matrix must be invertible")
}

/// Gaussian log density via an explicit inverse and determinant.
pub fn gaussian_logpdf(x: &Matrix, mean: &Matrix, cov: &Matrix) -> f64 {
    let d = x - mean;
    let k = x.nrows() as f64;
    let quad = (d.transpose() * inverse(cov) * &d)[(0, 0)];
    -0.5 * quad - 0.5 * cov.determinant().ln() - 0.5 * k * (2.0 * std::f64::consts::PI).ln()
}

/// Textbook update: `S = HPHᵀ + R`, `K = PHᵀS⁻¹`, `m + K(a − Hm)`, `P − KSKᵀ`.
pub fn covariance_update(m: &Matrix, p: &Matrix, h: &Matrix, r: &Matrix, a: &Matrix) -> (Matrix, Matrix, f64) {
    let s = h * p * h.transpose() + r;
    let k = p * h.transpose() * inverse(&s);
    let a_hat = h * m;
    let mean = m + &k * (a - &a_hat);
    let cov = p - &k * &s * k.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    (mean, cov, gaussian_logpdf(a, &a_hat, &s))
}

#[derive(Debug, Clone)]
pub struct KalmanOutput {
    pub predicted: Vec<(Matrix, Matrix)>,
    pub filtered: Vec<(Matrix, Matrix)>,
    pub loglik: f64,
}

/// Discrete Kalman filter on the exactly discretized model; `None`
/// observations are predicted through.
pub fn kalman_filter(model: &LinearGaussian, times: &[f64], observations: &[Option<Matrix>]) -> KalmanOutput {
    assert_eq!(times.len(), observations.len());
    let mut m = model.mu0.clone();
    let mut p = model.sigma0.clone();
    let mut out = KalmanOutput { predicted: vec![], filtered: vec![], loglik: 0.0 };
    for (k, (t, a)) in times.iter().zip(observations).enumerate() {
        if k > 0 {
            let (phi, qd) = discretize(&model.f, &model.q, t - times[k - 1]);
            m = &phi * &m;
            p = &phi * &p * phi.transpose() + qd;
        }
        out.predicted.push((m.clone(), p.clone()));
        if let Some(a) = a {
            let (mn, pn, ll) = covariance_update(&m, &p, &model.h, &model.r, a);
            m = mn;
            p = pn;
            out.loglik += ll;
        }
        out.filtered.push((m.clone(), p.clone()));
    }
    out
}

/// Discrete RTS smoother over a [`kalman_filter`] run.
pub fn rts_smoother(model: &LinearGaussian, times: &[f64], kf: &KalmanOutput) -> Vec<(Matrix, Matrix)> {
    let n = times.len();
    let mut out = vec![kf.filtered[n - 1].clone(); n];
    for k in (0..n - 1).rev() {
        let (phi, _) = discretize(&model.f, &model.q, times[k + 1] - times[k]);
        let (m, p) = &kf.filtered[k];
        let (m_pred, p_pred) = &kf.predicted[k + 1];
        let g = p * phi.transpose() * inverse(p_pred);
        let (ms_next, ps_next) = &out[k + 1];
        let ms = m + &g * (ms_next - m_pred);
        let ps = p + &g * (ps_next - p_pred) * g.transpose();
        out[k] = (ms, (&ps + ps.transpose()) * 0.5);
    }
    out
}

/// Mean and covariance of the observations `a₀:T` of a scalar LGSSM,
/// built from `Cov(z_s, z_t) = e^{F(t−s)} Var(z_s)` rather than by filtering.
pub fn scalar_marginal(model: &LinearGaussian, times: &[f64]) -> (Matrix, Matrix) {
    let (f, q, r) = (model.f[(0, 0)], model.q[(0, 0)], model.r[(0, 0)]);
    let n = times.len();
    let mut var = vec![0.0; n];
    var[0] = model.sigma0[(0, 0)];
    for k in 1..n {
        let dt = times[k] - times[k - 1];
        let e = (2.0 * f * dt).exp();
        var[k] = e * var[k - 1] + if f == 0.0 { q * dt } else { q * (e - 1.0) / (2.0 * f) };
    }
    let mut cov = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let c = (f * (times[j] - times[i])).exp() * var[i];
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
        cov[(i, i)] += r;
    }
    let mean = Matrix::from_fn(n, 1, |i, _| (f * (times[i] - times[0])).exp() * model.mu0[(0, 0)]);
    (mean, cov)
}

/// `log p(a₀:T)` for a scalar LGSSM from the joint Gaussian.
pub fn scalar_marginal_loglik(model: &LinearGaussian, times: &[f64], values: &[f64]) -> f64 {
    let (mean, cov) = scalar_marginal(model, times);
    gaussian_logpdf(&Matrix::from_column_slice(times.len(), 1, values), &mean, &cov)
}

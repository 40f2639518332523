//! Prediction between observations: the mean and fundamental-matrix ODEs
//! integrated on a fixed subgrid, with the covariance assembled in
//! square-root form.

use serde::{Deserialize, Serialize};

use crate::autodiff::{reduce_sum_matrix_sqrts, sum_matrix_sqrts, Tape, Var};
use crate::dynamics::BoundDynamics;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Relative slack when deciding whether a gap is a whole number of steps.
const GRID_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Rk4,
}

/// Node times `τ₁ = t₀ < … < τₙ = t₁`, spaced `η` apart except possibly
/// the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGrid {
    pub times: Vec<f64>,
}

impl SubGrid {
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1] - w[0]))
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("empty subgrid")
    }
}

pub fn make_subgrid(t0: f64, t1: f64, eta: f64) -> Result<SubGrid> {
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidGrid(format!("nonpositive gap from {t0} to {t1}")));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidGrid(format!("step must be positive, got {eta}")));
    }
    let ratio = (t1 - t0) / eta;
    let steps = ((ratio - GRID_SLACK * ratio.max(1.0)).ceil() as usize).max(1);
    let mut times: Vec<f64> = (0..steps).map(|j| t0 + j as f64 * eta).collect();
    times.push(t1);
    Ok(SubGrid { times })
}

/// Gaussian belief `N(mean, factor·factorᵀ)` recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SqrtGaussian<'t> {
    pub mean: Var<'t>,
    pub factor: Var<'t>,
}

impl<'t> SqrtGaussian<'t> {
    pub fn new(mean: Var<'t>, factor: Var<'t>) -> Self {
        assert_eq!(mean.cols(), 1, "mean must be a column vector");
        assert_eq!(factor.shape(), (mean.rows(), mean.rows()), "factor must be square and match the mean");
        Self { mean, factor }
    }

    pub fn dim(&self) -> usize {
        self.mean.rows()
    }

    pub fn covariance(&self) -> Matrix {
        let l = self.factor.value();
        &l * l.transpose()
    }
}

/// Result of one predict step.
#[derive(Clone, Debug)]
pub struct PredictOutput<'t> {
    pub predicted: SqrtGaussian<'t>,
    /// Mean at every subgrid node, starting with the input mean.
    pub means: Vec<Var<'t>>,
    /// Fundamental matrix at every subgrid node, starting with `I`.
    pub phis: Vec<Var<'t>>,
}

/// One explicit step of the coupled system `ṁ = f(m)`, `Φ̇ = F_z(m)Φ`.
pub(crate) fn coupled_step<'t>(
    dynamics: &BoundDynamics<'t>,
    m: Var<'t>,
    phi: Var<'t>,
    h: f64,
    solver: Solver,
) -> (Var<'t>, Var<'t>) {
    let tape = m.tape();
    let rhs = |m: Var<'t>, phi: Var<'t>| {
        let (f, j) = dynamics.drift_and_jacobian(m);
        (f, j.matmul(phi))
    };
    match solver {
        Solver::Euler => {
            let (k_m, k_p) = rhs(m, phi);
            (tape.lincomb(&[(m, 1.0), (k_m, h)]), tape.lincomb(&[(phi, 1.0), (k_p, h)]))
        }
        Solver::Rk4 => {
            let (k1m, k1p) = rhs(m, phi);
            let (k2m, k2p) = rhs(tape.lincomb(&[(m, 1.0), (k1m, h / 2.0)]), tape.lincomb(&[(phi, 1.0), (k1p, h / 2.0)]));
            let (k3m, k3p) = rhs(tape.lincomb(&[(m, 1.0), (k2m, h / 2.0)]), tape.lincomb(&[(phi, 1.0), (k2p, h / 2.0)]));
            let (k4m, k4p) = rhs(tape.lincomb(&[(m, 1.0), (k3m, h)]), tape.lincomb(&[(phi, 1.0), (k3p, h)]));
            let w = h / 6.0;
            (
                tape.lincomb(&[(m, 1.0), (k1m, w), (k2m, 2.0 * w), (k3m, 2.0 * w), (k4m, w)]),
                tape.lincomb(&[(phi, 1.0), (k1p, w), (k2p, 2.0 * w), (k3p, 2.0 * w), (k4p, w)]),
            )
        }
    }
}

/// Trapezoid weight of node `j` among `n` nodes for the step lengths of `grid`.
fn trapezoid_weight(grid: &SubGrid, j: usize) -> f64 {
    let n = grid.times.len();
    let left = if j > 0 { grid.times[j] - grid.times[j - 1] } else { 0.0 };
    let right = if j + 1 < n { grid.times[j + 1] - grid.times[j] } else { 0.0 };
    0.5 * (left + right)
}

/// Numerical predict over `grid`.
///
/// The covariance is `Φₙ P Φₙᵀ + Σⱼ wⱼ Φⱼ D Φⱼᵀ` with trapezoid weights `wⱼ`
/// (`η/2` at the ends, `η` inside), assembled from square-root factors.
pub fn predict_moments<'t>(
    dynamics: &BoundDynamics<'t>,
    belief: &SqrtGaussian<'t>,
    grid: &SubGrid,
    solver: Solver,
) -> Result<PredictOutput<'t>> {
    let tape = belief.mean.tape();
    let n = belief.dim();
    let mut m = belief.mean;
    let mut phi = tape.constant(Matrix::identity(n, n));
    let mut means = vec![m];
    let mut phis = vec![phi];
    for (t, h) in grid.steps() {
        (m, phi) = coupled_step(dynamics, m, phi, h, solver);
        if !m.is_finite() || !phi.is_finite() {
            return Err(Error::DivergedIntegration { time: t + h });
        }
        means.push(m);
        phis.push(phi);
    }
    let d_sqrt = dynamics.d_sqrt;
    let mut factors = Vec::with_capacity(phis.len() + 1);
    factors.push(phi.matmul(belief.factor));
    for (j, p) in phis.iter().enumerate() {
        factors.push(p.matmul(d_sqrt).scale(trapezoid_weight(grid, j).sqrt()));
    }
    let factor = reduce_sum_matrix_sqrts(&factors);
    Ok(PredictOutput { predicted: SqrtGaussian::new(m, factor), means, phis })
}

/// Discretized LTI transition over one gap: `Φ = e^{FΔt}` and a factor of
/// `∫₀^Δt e^{Fs} Q e^{Fᵀs} ds`.
#[derive(Clone, Copy, Debug)]
pub struct LtiTransition<'t> {
    pub phi: Var<'t>,
    pub noise_sqrt: Var<'t>,
}

/// Van Loan construction: `exp([[F, Q], [0, −Fᵀ]]Δt) = [[Φ, M₁₂], [0, Φ⁻ᵀ]]`
/// with process noise `M₁₂ Φᵀ`.
pub fn lti_transition<'t>(f: Var<'t>, q_diag: Var<'t>, dt: f64) -> Result<LtiTransition<'t>> {
    let tape = f.tape();
    let n = f.rows();
    let zeros = tape.constant(Matrix::zeros(n, n));
    let top = tape.concat_cols(&[f, q_diag.diag_embed()]);
    let bottom = tape.concat_cols(&[zeros, -f.t()]);
    let block = tape.concat_rows(&[top, bottom]).scale(dt).expm();
    let phi = block.slice(0, 0, n, n);
    let m12 = block.slice(0, n, n, n);
    let qd = m12.matmul(phi.t());
    let qd = (qd + qd.t()).scale(0.5);
    Ok(LtiTransition { phi, noise_sqrt: qd.cholesky()? })
}

/// Applies a discretized LTI transition to a belief.
pub fn apply_lti_transition<'t>(transition: &LtiTransition<'t>, belief: &SqrtGaussian<'t>) -> PredictOutput<'t> {
    let tape = belief.mean.tape();
    let n = belief.dim();
    let mean = transition.phi.matmul(belief.mean);
    let factor = sum_matrix_sqrts(transition.phi.matmul(belief.factor), transition.noise_sqrt);
    PredictOutput {
        predicted: SqrtGaussian::new(mean, factor),
        means: vec![belief.mean, mean],
        phis: vec![tape.constant(Matrix::identity(n, n)), transition.phi],
    }
}

/// Closed-form predict for LTI dynamics.
pub fn analytic_predict_lti<'t>(
    f: Var<'t>,
    q_diag: Var<'t>,
    belief: &SqrtGaussian<'t>,
    dt: f64,
) -> Result<PredictOutput<'t>> {
    Ok(apply_lti_transition(&lti_transition(f, q_diag, dt)?, belief))
}

/// Constant-valued belief on a fresh tape, for callers outside training.
pub fn constant_belief<'t>(tape: &'t Tape, mean: &Matrix, factor: &Matrix) -> SqrtGaussian<'t> {
    SqrtGaussian::new(tape.constant(mean.clone()), tape.constant(factor.clone()))
}

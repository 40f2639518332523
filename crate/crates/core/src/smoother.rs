//! Continuous-discrete Type II extended RTS smoothing in square-root form.
//!
//! Between consecutive events the smoothed moments obey, in reversed time
//! `s = t_k − t`,
//!
//! ```text
//! dmˢ/ds = −f(m_t) − C_t (mˢ − m_t)
//! dPˢ/ds = −C_t Pˢ − Pˢ C_tᵀ + D,        C_t = F_z(m_t) + D P_t⁻¹
//! ```
//!
//! where `(m_t, P_t)` is the filter's predictive belief inside the interval.
//! The covariance is advanced one substep at a time with Simpson's rule in
//! factor form, `[Ψ Pˢ^{1/2}, √(h/6) Ψ D^{1/2}, 2√(h/6) Ψ_½ D^{1/2}, √(h/6) D^{1/2}]`,
//! where `Ψ` is the reversed-time transition of `−C` over the substep and
//! `Ψ_½` the one over its second half. All weights are positive, so the
//! factor stays a square root, and the rule is fourth order like RK4.

use crate::autodiff::{reduce_sum_matrix_sqrts, Tape, Var};
use crate::dynamics::BoundDynamics;
use crate::error::{Error, Result};
use crate::filter::{FilterResult, Propagation};
use crate::integrate::{coupled_step, make_subgrid, Solver, SqrtGaussian, SubGrid};
use crate::linalg::{Matrix, SINGULAR_TOLERANCE};

#[derive(Clone, Debug)]
pub struct SmoothResult<'t> {
    pub times: Vec<f64>,
    /// Smoothed belief at every filter event, queries included.
    pub beliefs: Vec<SqrtGaussian<'t>>,
}

/// Filter predictive belief at one replay point.
#[derive(Clone, Copy)]
struct Replay<'t> {
    time: f64,
    mean: Var<'t>,
    factor: Var<'t>,
}

/// Re-runs the forward predict from `start` and records the belief at every
/// quarter of each substep of `grid`. Even points use Simpson's rule for the
/// noise over two quarters; odd points a one-quarter trapezoid.
fn replay_interval<'t>(
    dynamics: &BoundDynamics<'t>,
    start: &SqrtGaussian<'t>,
    times: &[f64],
    solver: Solver,
) -> Result<Vec<Replay<'t>>> {
    let tape = start.mean.tape();
    let n = start.dim();
    let eye = tape.constant(Matrix::identity(n, n));
    let d = dynamics.d_sqrt;
    let mut points = vec![Replay { time: times[0], mean: start.mean, factor: start.factor }];
    let mut l = start.factor;
    for w in times.windows(2) {
        let quarter = (w[1] - w[0]) / 4.0;
        for half in 0..2 {
            let base = points.len() - 1;
            let (m_mid, phi1) = coupled_step(dynamics, points[base].mean, eye, quarter, solver);
            let (m_end, phi2) = coupled_step(dynamics, m_mid, eye, quarter, solver);
            let c = (quarter / 2.0).sqrt();
            let l_mid = reduce_sum_matrix_sqrts(&[phi1.matmul(l), phi1.matmul(d).scale(c), d.scale(c)]);
            let phi = phi2.matmul(phi1);
            let s = (quarter / 3.0).sqrt();
            l = reduce_sum_matrix_sqrts(&[phi.matmul(l), phi.matmul(d).scale(s), phi2.matmul(d).scale(2.0 * s), d.scale(s)]);
            for (j, (mean, factor)) in [(m_mid, l_mid), (m_end, l)].into_iter().enumerate() {
                let time = w[0] + quarter * (2 * half + j + 1) as f64;
                if !mean.is_finite() || !factor.is_finite() {
                    return Err(Error::DivergedIntegration { time });
                }
                points.push(Replay { time, mean, factor });
            }
        }
    }
    Ok(points)
}

/// `C_t = F_z(m_t) + D P_t⁻¹` at a replay point.
fn smoothing_gain<'t>(dynamics: &BoundDynamics<'t>, point: &Replay<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let tape = point.mean.tape();
    let n = point.mean.rows();
    if point.factor.value().diagonal().iter().any(|d| !(d.abs() > SINGULAR_TOLERANCE)) {
        return Err(Error::SingularFilteredCovariance { time: point.time });
    }
    let singular = |_| Error::SingularFilteredCovariance { time: point.time };
    let eye = tape.constant(Matrix::identity(n, n));
    let p_inv = point.factor.tri_solve_transposed(point.factor.tri_solve(eye).map_err(singular)?).map_err(singular)?;
    let (f, jac) = dynamics.drift_and_jacobian(point.mean);
    Ok((f, jac + dynamics.q_diag.diag_mul(p_inv)))
}

/// Largest `h·‖C‖` the first backward substep may take.
pub const STIFFNESS_LIMIT: f64 = 0.5;
/// Growth factor of the graded substeps. `C` decays like `1/τ` away from a
/// precise update, so `h·‖C‖` stays bounded as they grow.
pub const SUBSTEP_GROWTH: f64 = 1.5;

/// Substeps over `[t0, t1]` starting at `first` and growing geometrically to
/// `eta`, then uniform.
fn graded_subgrid(t0: f64, t1: f64, first: f64, eta: f64) -> Result<SubGrid> {
    let mut times = vec![t0];
    let mut h = first;
    let mut t = t0;
    while h < eta && t + h < t1 {
        t += h;
        times.push(t);
        h *= SUBSTEP_GROWTH;
    }
    let rest = make_subgrid(t, t1, eta)?;
    times.extend_from_slice(&rest.times[1..]);
    Ok(SubGrid { times })
}

/// Upper bound on `‖C‖` at the filtered belief: `‖F_z‖_F + max(q)·tr(P⁻¹)`.
/// `C` is largest right after a precise update, where `P` is smallest.
fn gain_bound<'t>(dynamics: &BoundDynamics<'t>, belief: &SqrtGaussian<'t>) -> f64 {
    let l = belief.factor.value();
    let n = l.nrows();
    let trace_inv = l.solve_lower_triangular(&Matrix::identity(n, n)).map_or(f64::INFINITY, |inv| inv.norm_squared());
    let q_max = dynamics.q_diag.value().max();
    dynamics.drift_and_jacobian(belief.mean).1.value().norm() + q_max * trace_inv
}

/// One reversed-time step of length `h` from replay point `from` to
/// `from − 2`, returning the smoothed mean and the transition of `−C`.
fn backward_half_step<'t>(
    replay: &[Replay<'t>],
    gains: &[(Var<'t>, Var<'t>)],
    from: usize,
    ms: Var<'t>,
    h: f64,
    solver: Solver,
    eye: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let tape = ms.tape();
    let rhs = |k: usize, ms: Var<'t>, psi: Var<'t>| {
        let (f, c) = gains[k];
        (-(f + c.matmul(ms - replay[k].mean)), -c.matmul(psi))
    };
    let (k1m, k1p) = rhs(from, ms, eye);
    match solver {
        Solver::Euler => (tape.lincomb(&[(ms, 1.0), (k1m, h)]), tape.lincomb(&[(eye, 1.0), (k1p, h)])),
        Solver::Rk4 => {
            let (k2m, k2p) =
                rhs(from - 1, tape.lincomb(&[(ms, 1.0), (k1m, h / 2.0)]), tape.lincomb(&[(eye, 1.0), (k1p, h / 2.0)]));
            let (k3m, k3p) =
                rhs(from - 1, tape.lincomb(&[(ms, 1.0), (k2m, h / 2.0)]), tape.lincomb(&[(eye, 1.0), (k2p, h / 2.0)]));
            let (k4m, k4p) = rhs(from - 2, tape.lincomb(&[(ms, 1.0), (k3m, h)]), tape.lincomb(&[(eye, 1.0), (k3p, h)]));
            let w = h / 6.0;
            (
                tape.lincomb(&[(ms, 1.0), (k1m, w), (k2m, 2.0 * w), (k3m, 2.0 * w), (k4m, w)]),
                tape.lincomb(&[(eye, 1.0), (k1p, w), (k2p, 2.0 * w), (k3p, 2.0 * w), (k4p, w)]),
            )
        }
    }
}

/// One backward interval: from the smoothed belief at `t_k` to `t_{k−1}`,
/// given the filtered belief at `t_{k−1}`.
pub fn smooth_step<'t>(
    dynamics: &BoundDynamics<'t>,
    current: &SqrtGaussian<'t>,
    filtered_prev: &SqrtGaussian<'t>,
    t_prev: f64,
    t_curr: f64,
    propagation: &Propagation,
) -> Result<SqrtGaussian<'t>> {
    let tape: &'t Tape = current.mean.tape();
    let n = current.dim();
    let solver = propagation.solver();
    // Substeps start below η when the backward ODE is stiff at the update.
    let rho = gain_bound(dynamics, filtered_prev);
    let grid = if rho.is_finite() && rho * propagation.eta > STIFFNESS_LIMIT {
        graded_subgrid(t_prev, t_curr, STIFFNESS_LIMIT / rho, propagation.eta)?
    } else {
        make_subgrid(t_prev, t_curr, propagation.eta)?
    };
    let replay = replay_interval(dynamics, filtered_prev, &grid.times, solver)?;
    let eye = tape.constant(Matrix::identity(n, n));
    let gains = replay.iter().map(|p| smoothing_gain(dynamics, p)).collect::<Result<Vec<_>>>()?;
    let (mut ms, mut ls) = (current.mean, current.factor);
    let substeps = grid.times.len() - 1;
    for i in (0..substeps).rev() {
        let h = grid.times[i + 1] - grid.times[i];
        // Two reversed-time half steps; replay point 4i+4 is the substep's end node.
        let (mid_m, psi_a) = backward_half_step(&replay, &gains, 4 * i + 4, ms, h / 2.0, solver, eye);
        let (ms_next, psi_b) = backward_half_step(&replay, &gains, 4 * i + 2, mid_m, h / 2.0, solver, eye);
        let psi = psi_b.matmul(psi_a);
        let d = dynamics.d_sqrt;
        let s = (h / 6.0).sqrt();
        ls = reduce_sum_matrix_sqrts(&[psi.matmul(ls), psi.matmul(d).scale(s), psi_b.matmul(d).scale(2.0 * s), d.scale(s)]);
        ms = ms_next;
        if !ms.is_finite() || !ls.is_finite() {
            return Err(Error::DivergedIntegration { time: grid.times[i] });
        }
    }
    Ok(SqrtGaussian::new(ms, ls))
}

/// Smooths a complete filter run. The last belief is the filtered one.
pub fn smooth<'t>(
    dynamics: &BoundDynamics<'t>,
    result: &FilterResult<'t>,
    propagation: &Propagation,
) -> Result<SmoothResult<'t>> {
    let steps = &result.steps;
    let n = steps.len();
    if n == 0 {
        return Err(Error::Empty("smoothing needs at least one filter step"));
    }
    let mut beliefs = vec![steps[n - 1].filtered; n];
    for k in (1..n).rev() {
        beliefs[k - 1] =
            smooth_step(dynamics, &beliefs[k], &steps[k - 1].filtered, steps[k - 1].time, steps[k].time, propagation)?;
    }
    Ok(SmoothResult { times: steps.iter().map(|s| s.time).collect(), beliefs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Drift;
    use crate::filter::{filter, Event, Integrator, SsmParams};
    use crate::linalg;
    use crate::reference::{self, LinearGaussian};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graded_grid_grows_to_eta_and_covers_the_interval() {
        let g = graded_subgrid(1.0, 2.0, 1e-6, 0.01).unwrap();
        let steps: Vec<f64> = g.times.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(g.times[0], 1.0);
        assert_eq!(*g.times.last().unwrap(), 2.0);
        assert!((steps[0] - 1e-6).abs() < 1e-15);
        assert!(steps.windows(2).all(|w| w[1] <= w[0] * SUBSTEP_GROWTH * (1.0 + 1e-9)));
        assert!(steps.iter().all(|&h| h > 0.0 && h <= 0.01 * (1.0 + 1e-9)));
        assert!(g.times.len() < 200, "{} substeps", g.times.len());
        // An interval shorter than the ramp ends inside it.
        let g = graded_subgrid(0.0, 1e-5, 1e-6, 0.01).unwrap();
        assert_eq!(*g.times.last().unwrap(), 1e-5);
    }

    fn ssm_from<'t>(tape: &'t Tape, model: &LinearGaussian) -> SsmParams<'t> {
        let q_diag = Matrix::from_column_slice(model.dim(), 1, model.q.diagonal().as_slice());
        SsmParams {
            mu0: tape.constant(model.mu0.clone()),
            sigma0_sqrt: tape.constant(linalg::cholesky(&model.sigma0).unwrap().into_inner()),
            h: tape.constant(model.h.clone()),
            r_sqrt: tape.constant(linalg::cholesky(&model.r).unwrap().into_inner()),
            dynamics: BoundDynamics::from_parts(Drift::Lti(tape.constant(model.f.clone())), tape.constant(q_diag)),
        }
    }

    fn events<'t>(tape: &'t Tape, times: &[f64], values: &[Matrix]) -> Vec<Event<'t>> {
        times.iter().zip(values).map(|(t, v)| Event { time: *t, observation: Some(tape.constant(v.clone())) }).collect()
    }

    fn max_error_vs_rts(model: &LinearGaussian, times: &[f64], values: &[Matrix], eta: f64) -> (f64, f64) {
        let obs: Vec<_> = values.iter().cloned().map(Some).collect();
        let kf = reference::kalman_filter(model, times, &obs);
        let rts = reference::rts_smoother(model, times, &kf);
        let tape = Tape::new();
        let ssm = ssm_from(&tape, model);
        let prop = Propagation::new(Integrator::AnalyticLti, eta);
        let fr = filter(&ssm, &events(&tape, times, values), &prop).unwrap();
        let sr = smooth(&ssm.dynamics, &fr, &prop).unwrap();
        let mut err = (0.0f64, 0.0f64);
        for (b, (m, p)) in sr.beliefs.iter().zip(&rts) {
            err.0 = err.0.max((b.mean.value() - m).amax());
            err.1 = err.1.max((b.covariance() - p).amax());
        }
        err
    }

    #[test]
    fn final_belief_is_filtered_exactly() {
        let model = LinearGaussian::scalar(-0.4, 0.3, 0.2, 0.0, 1.0);
        let tape = Tape::new();
        let ssm = ssm_from(&tape, &model);
        let values: Vec<Matrix> = [0.2, -0.1, 0.4].iter().map(|v| Matrix::from_element(1, 1, *v)).collect();
        let prop = Propagation::new(Integrator::Rk4, 0.05);
        let fr = filter(&ssm, &events(&tape, &[0.0, 0.5, 1.0], &values), &prop).unwrap();
        let sr = smooth(&ssm.dynamics, &fr, &prop).unwrap();
        assert_eq!(sr.beliefs[2].mean.value(), fr.steps[2].filtered.mean.value());
        assert_eq!(sr.beliefs[2].factor.value(), fr.steps[2].filtered.factor.value());

        let single = filter(&ssm, &events(&tape, &[0.0], &values[..1]), &prop).unwrap();
        let s = smooth(&ssm.dynamics, &single, &prop).unwrap();
        assert_eq!(s.beliefs[0].mean.value(), single.steps[0].filtered.mean.value());
    }

    #[test]
    fn scalar_lti_matches_discrete_rts() {
        let model = LinearGaussian::scalar(-0.8, 0.5, 0.3, 0.2, 1.0);
        let times = [0.0, 0.4, 1.0];
        let values: Vec<Matrix> = [0.6, -0.3, 0.9].iter().map(|v| Matrix::from_element(1, 1, *v)).collect();
        let (em, ep) = max_error_vs_rts(&model, &times, &values, 0.01);
        assert!(em < 1e-4 && ep < 1e-4, "{em} {ep}");
        let (coarse, _) = max_error_vs_rts(&model, &times, &values, 0.1);
        let (fine, _) = max_error_vs_rts(&model, &times, &values, 0.05);
        assert!(fine <= coarse);
    }

    #[test]
    fn multivariate_lti_matches_discrete_rts_and_shrinks_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let m = 3;
            let a = Matrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let f = &a - a.transpose() - Matrix::identity(m, m) * 0.3;
            let q = Matrix::from_diagonal(&Matrix::from_fn(m, 1, |_, _| rng.random_range(0.1..0.5)).column(0).into_owned());
            let model = LinearGaussian {
                f,
                q,
                h: Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
                r: Matrix::identity(2, 2) * 0.2,
                mu0: Matrix::zeros(m, 1),
                sigma0: Matrix::identity(m, m),
            };
            let times = [0.0, 0.3, 0.5, 1.1, 1.4];
            let values: Vec<Matrix> = times.iter().map(|_| Matrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0))).collect();
            let (em, ep) = max_error_vs_rts(&model, &times, &values, 0.01);
            assert!(em < 1e-4 && ep < 1e-4, "{em} {ep}");

            let tape = Tape::new();
            let ssm = ssm_from(&tape, &model);
            let prop = Propagation::new(Integrator::AnalyticLti, 0.01);
            let fr = filter(&ssm, &events(&tape, &times, &values), &prop).unwrap();
            let sr = smooth(&ssm.dynamics, &fr, &prop).unwrap();
            for (s, f) in sr.beliefs.iter().zip(&fr.steps) {
                let (ps, pf) = (s.covariance(), f.filtered.covariance());
                for i in 0..m {
                    assert!(ps[(i, i)] <= pf[(i, i)] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_diffusion_reverses_the_flow() {
        let f0 = Matrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.0, -0.1]);
        let tape = Tape::new();
        let ssm = SsmParams {
            mu0: tape.constant(Matrix::zeros(2, 1)),
            sigma0_sqrt: tape.constant(Matrix::identity(2, 2)),
            h: tape.constant(Matrix::from_row_slice(1, 2, &[1.0, 0.0])),
            r_sqrt: tape.constant(Matrix::from_element(1, 1, 0.5)),
            dynamics: BoundDynamics::from_parts(Drift::Lti(tape.constant(f0.clone())), tape.constant(Matrix::zeros(2, 1))),
        };
        let times = [0.0, 0.5, 1.2];
        let values: Vec<Matrix> = [0.3, -0.2, 0.5].iter().map(|v| Matrix::from_element(1, 1, *v)).collect();
        let prop = Propagation::new(Integrator::Rk4, 0.01);
        let fr = filter(&ssm, &events(&tape, &times, &values), &prop).unwrap();
        let sr = smooth(&ssm.dynamics, &fr, &prop).unwrap();
        for k in 1..3 {
            let back = linalg::matrix_exponential(&(&f0 * -(times[k] - times[k - 1])));
            let expected = back * sr.beliefs[k].mean.value();
            assert!((sr.beliefs[k - 1].mean.value() - expected).amax() < 1e-5);
        }
    }

    #[test]
    fn static_state_smoothing_pools_all_observations() {
        let model = LinearGaussian::scalar(0.0, 0.0, 0.5, 0.0, 2.0);
        let times = [0.0, 0.3, 1.0, 1.7];
        let raw = [0.4, 1.0, -0.2, 0.6];
        let values: Vec<Matrix> = raw.iter().map(|v| Matrix::from_element(1, 1, *v)).collect();
        let tape = Tape::new();
        let ssm = ssm_from(&tape, &model);
        let prop = Propagation::new(Integrator::Rk4, 0.05);
        let fr = filter(&ssm, &events(&tape, &times, &values), &prop).unwrap();
        let sr = smooth(&ssm.dynamics, &fr, &prop).unwrap();
        let precision = 1.0 / 2.0 + 4.0 / 0.5;
        let mean = raw.iter().sum::<f64>() / 0.5 / precision;
        for b in &sr.beliefs {
            assert!((b.mean.item() - mean).abs() < 1e-6);
            assert!((b.covariance()[(0, 0)] - 1.0 / precision).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_is_deterministic() {
        let model = LinearGaussian::scalar(-0.4, 0.3, 0.2, 0.0, 1.0);
        let values: Vec<Matrix> = [0.2, -0.1, 0.4].iter().map(|v| Matrix::from_element(1, 1, *v)).collect();
        let run = || {
            let tape = Tape::new();
            let ssm = ssm_from(&tape, &model);
            let prop = Propagation::new(Integrator::Rk4, 0.05);
            let fr = filter(&ssm, &events(&tape, &[0.0, 0.5, 1.0], &values), &prop).unwrap();
            let sr = smooth(&ssm.dynamics, &fr, &prop).unwrap();
            sr.beliefs.iter().map(|b| (b.mean.value(), b.factor.value())).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

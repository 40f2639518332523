//! Square-root continuous-discrete filtering.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::dynamics::BoundDynamics;
use crate::error::{Error, Result};
use crate::integrate::{
    apply_lti_transition, lti_transition, make_subgrid, predict_moments, LtiTransition, PredictOutput, Solver,
    SqrtGaussian,
};
use crate::linalg::{Matrix, SINGULAR_TOLERANCE};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// How the predict step is carried out between events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    Rk4,
    /// Matrix-exponential predict; valid only for LTI dynamics.
    AnalyticLti,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagation {
    pub integrator: Integrator,
    /// Subgrid step for the numerical integrators.
    pub eta: f64,
}

impl Propagation {
    pub fn new(integrator: Integrator, eta: f64) -> Self {
        Self { integrator, eta }
    }

    /// Fixed-step solver used where a numerical integrator is required even
    /// with analytic prediction (smoothing).
    pub fn solver(&self) -> Solver {
        match self.integrator {
            Integrator::Euler => Solver::Euler,
            Integrator::Rk4 | Integrator::AnalyticLti => Solver::Rk4,
        }
    }
}

/// State-space parameters recorded on a tape.
#[derive(Clone)]
pub struct SsmParams<'t> {
    pub mu0: Var<'t>,
    pub sigma0_sqrt: Var<'t>,
    /// `h × m` measurement matrix.
    pub h: Var<'t>,
    /// Lower-triangular `h × h` factor of `R`.
    pub r_sqrt: Var<'t>,
    pub dynamics: BoundDynamics<'t>,
}

/// A filter time point: an observation, or a predict-only query.
#[derive(Clone, Copy, Debug)]
pub struct Event<'t> {
    pub time: f64,
    pub observation: Option<Var<'t>>,
}

/// Output of the measurement update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateOutput<'t> {
    pub posterior: SqrtGaussian<'t>,
    /// Predicted measurement `H m⁻`.
    pub a_hat: Var<'t>,
    /// Lower factor of the innovation covariance `S`.
    pub s_sqrt: Var<'t>,
    /// `log N(a; H m⁻, S)`.
    pub loglik: Var<'t>,
}

/// Measurement update from one QR of the transposed block factor
/// `[[R^{1/2}, H P^{1/2}], [0, P^{1/2}]]`, whose lower factor
/// `[[X, 0], [Y, Z]]` gives `S^{1/2} = X`, `K = Y X⁻¹` and `P^{1/2} = Z`.
///
/// `index` is the timestep reported with a singular innovation.
pub fn update<'t>(
    a: Var<'t>,
    prior: &SqrtGaussian<'t>,
    h: Var<'t>,
    r_sqrt: Var<'t>,
    index: usize,
) -> Result<UpdateOutput<'t>> {
    let tape = a.tape();
    let (p, m) = (h.rows(), prior.dim());
    assert_eq!(h.cols(), m, "measurement matrix width must match the state");
    assert_eq!(a.shape(), (p, 1), "observation must be an h-vector");
    assert_eq!(r_sqrt.shape(), (p, p), "R factor must be h x h");
    let zeros = tape.constant(Matrix::zeros(m, p));
    let hp = h.matmul(prior.factor);
    let top = tape.concat_cols(&[r_sqrt, hp]);
    let bottom = tape.concat_cols(&[zeros, prior.factor]);
    let lower = tape.concat_rows(&[top, bottom]).t().qr_r().t();
    let x = lower.slice(0, 0, p, p);
    let y = lower.slice(p, 0, m, p);
    let z = lower.slice(p, p, m, m);
    if x.value().diagonal().iter().any(|d| !(d.abs() >= SINGULAR_TOLERANCE)) {
        return Err(Error::SingularInnovation { index });
    }
    let a_hat = h.matmul(prior.mean);
    let w = x.tri_solve(a - a_hat).map_err(|_| Error::SingularInnovation { index })?;
    let mean = prior.mean + y.matmul(w);
    let log_det = x.diag().ln().sum();
    let loglik = tape.lincomb(&[(w.square().sum(), -0.5), (log_det, -1.0)]).add_scalar(-(p as f64) * HALF_LOG_2PI);
    Ok(UpdateOutput { posterior: SqrtGaussian::new(mean, z), a_hat, s_sqrt: x, loglik })
}

/// One filter event.
#[derive(Clone, Debug)]
pub struct FilterStep<'t> {
    pub time: f64,
    /// Belief before conditioning on this event's observation.
    pub predicted: SqrtGaussian<'t>,
    /// Belief after conditioning; equals `predicted` for query events.
    pub filtered: SqrtGaussian<'t>,
    pub update: Option<UpdateOutput<'t>>,
    /// Predict step from the previous event, absent for the first.
    pub predict: Option<PredictOutput<'t>>,
}

#[derive(Clone, Debug)]
pub struct FilterResult<'t> {
    pub steps: Vec<FilterStep<'t>>,
    /// `Σ log N(aₖ; âₖ, Sₖ)` over observed events.
    pub loglik: Var<'t>,
}

impl<'t> FilterResult<'t> {
    pub fn last(&self) -> &FilterStep<'t> {
        self.steps.last().expect("filter result without steps")
    }
}

/// Predicts `belief` forward by `dt` starting at `t0`.
pub fn predict<'t>(
    dynamics: &BoundDynamics<'t>,
    belief: &SqrtGaussian<'t>,
    t0: f64,
    dt: f64,
    propagation: &Propagation,
    cache: &mut HashMap<u64, LtiTransition<'t>>,
) -> Result<PredictOutput<'t>> {
    match propagation.integrator {
        Integrator::AnalyticLti => {
            let f = dynamics.lti_matrix().ok_or_else(|| {
                Error::config("integrator", "analytic-lti requires lti dynamics")
            })?;
            let transition = match cache.get(&dt.to_bits()) {
                Some(t) => *t,
                None => {
                    let t = lti_transition(f, dynamics.q_diag, dt)?;
                    cache.insert(dt.to_bits(), t);
                    t
                }
            };
            Ok(apply_lti_transition(&transition, belief))
        }
        Integrator::Euler | Integrator::Rk4 => {
            let grid = make_subgrid(t0, t0 + dt, propagation.eta)?;
            predict_moments(dynamics, belief, &grid, propagation.solver())
        }
    }
}

/// Runs the filter over `events`, starting from `N(μ₀, Σ₀)` at the first
/// event time. Query events are predicted through but not updated.
pub fn filter<'t>(ssm: &SsmParams<'t>, events: &[Event<'t>], propagation: &Propagation) -> Result<FilterResult<'t>> {
    let first = events.first().ok_or(Error::Empty("filter needs at least one event"))?;
    let tape = ssm.mu0.tape();
    let mut cache = HashMap::new();
    let mut steps: Vec<FilterStep<'t>> = Vec::with_capacity(events.len());
    let mut terms = Vec::new();
    let mut belief = SqrtGaussian::new(ssm.mu0, ssm.sigma0_sqrt);
    let mut last_time = first.time;
    for (k, event) in events.iter().enumerate() {
        let predict_out = if k == 0 {
            None
        } else {
            if !(event.time > last_time) {
                return Err(Error::InvalidGrid(format!("event times must increase ({last_time} then {})", event.time)));
            }
            let out = predict(&ssm.dynamics, &belief, last_time, event.time - last_time, propagation, &mut cache)?;
            belief = out.predicted;
            Some(out)
        };
        let predicted = belief;
        let update_out = match event.observation {
            Some(a) => {
                let u = update(a, &predicted, ssm.h, ssm.r_sqrt, k)?;
                terms.push((u.loglik, 1.0));
                belief = u.posterior;
                Some(u)
            }
            None => None,
        };
        steps.push(FilterStep { time: event.time, predicted, filtered: belief, update: update_out, predict: predict_out });
        last_time = event.time;
    }
    let loglik = if terms.is_empty() { tape.scalar(0.0) } else { tape.lincomb(&terms) };
    Ok(FilterResult { steps, loglik })
}

/// Observation events at `times` merged with predict-only events at
/// `queries`. Queries must lie in `[times₀, end]`, where `end` is at least
/// the last observation time; a query equal to an observation time is
/// served by that observation's event.
pub fn merge_queries<'t>(times: &[f64], observations: &[Var<'t>], queries: &[f64], end: f64) -> Result<Vec<Event<'t>>> {
    assert_eq!(times.len(), observations.len(), "one observation per time");
    let start = match times.first() {
        Some(s) => *s,
        None => return Err(Error::Empty("no observed timesteps")),
    };
    let end = end.max(*times.last().expect("nonempty"));
    for &q in queries {
        if !(q >= start && q <= end) {
            return Err(Error::QueryOutOfSpan { time: q, start, end });
        }
    }
    let mut events: Vec<Event<'t>> =
        times.iter().zip(observations).map(|(t, a)| Event { time: *t, observation: Some(*a) }).collect();
    for &q in queries {
        if !times.contains(&q) && !events.iter().any(|e| e.time == q) {
            events.push(Event { time: q, observation: None });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(events)
}

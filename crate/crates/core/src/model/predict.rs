use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BoundModel, Model};
use crate::autodiff::{sum_matrix_sqrts, Tape, Var};
use crate::data::IrregularSeries;
use crate::error::{Error, Result};
use crate::filter::{filter, merge_queries, predict, FilterResult};
use crate::integrate::SqrtGaussian;
use crate::linalg::Matrix;
use crate::nn::BoundHead;
use crate::params::ParamStore;
use crate::smoother::smooth;

/// Per-time predictive summaries over `y` plus sampled draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// `samples[s][k]` is draw `s` at `times[k]`.
    pub samples: Vec<Vec<Vec<f64>>>,
}

fn randn<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    Matrix::from_fn(n, 1, |_, _| StandardNormal.sample(rng))
}

fn column(v: &Matrix) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Filters the recognition means of the observed timesteps, with
/// predict-only events at `queries ⊂ [t₀, t_T]` of the series grid.
fn filter_recognized<'t>(bm: &BoundModel<'t>, series: &IrregularSeries, queries: &[f64]) -> Result<FilterResult<'t>> {
    let (times, aux): (Vec<f64>, Vec<Var<'t>>) = series.observations().map(|(t, y)| (t, bm.recognize(y).mean)).unzip();
    let end = series.times.last().copied().unwrap_or(f64::NEG_INFINITY);
    let events = merge_queries(&times, &aux, queries, end)?;
    filter(&bm.ssm, &events, &bm.propagation)
}

/// Factor of the auxiliary marginal `N(H m, H P Hᵀ + R)`.
fn aux_marginal<'t>(bm: &BoundModel<'t>, belief: &SqrtGaussian<'t>) -> (Var<'t>, Var<'t>) {
    let mean = bm.ssm.h.matmul(belief.mean);
    (mean, sum_matrix_sqrts(bm.ssm.h.matmul(belief.factor), bm.ssm.r_sqrt))
}

/// Plug-in `y` summary: the emission evaluated at the auxiliary mean. For the
/// identity emission the auxiliary variance is added to the emission's.
fn y_summary<'t>(bm: &BoundModel<'t>, a_mean: Var<'t>, a_factor: Var<'t>) -> (Vec<f64>, Vec<f64>) {
    let out = bm.emission.forward(a_mean);
    let std = match bm.emission {
        BoundHead::Identity(_) => {
            let f = a_factor.value();
            let var_a = (&f * f.transpose()).diagonal();
            let s = out.std.value();
            Matrix::from_fn(s.nrows(), 1, |i, _| (s[i] * s[i] + var_a[i]).sqrt())
        }
        BoundHead::Mlp(_) => out.std.value(),
    };
    (column(&out.mean.value()), column(&std))
}

fn y_draw<'t, R: Rng>(bm: &BoundModel<'t>, a: Var<'t>, rng: &mut R) -> Vec<f64> {
    let out = bm.emission.forward(a);
    column(&out.sample(&randn(rng, out.mean.rows())).value())
}

/// Smoothing-based imputation at `queries` between the first observation
/// and the end of the series grid.
pub fn impute<R: Rng>(
    model: &Model,
    store: &ParamStore,
    series: &IrregularSeries,
    queries: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<Prediction> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let bm = model.bind(store, &bound);
    let fr = filter_recognized(&bm, series, queries)?;
    let sr = smooth(&bm.ssm.dynamics, &fr, &bm.propagation)?;
    let mut out = Prediction { times: queries.to_vec(), mean: vec![], std: vec![], samples: vec![vec![]; n_samples] };
    for &q in queries {
        let k = sr.times.iter().position(|t| *t == q).expect("query merged into the filter events");
        let (a_mean, a_factor) = aux_marginal(&bm, &sr.beliefs[k]);
        let (mean, std) = y_summary(&bm, a_mean, a_factor);
        out.mean.push(mean);
        out.std.push(std);
        for draws in out.samples.iter_mut() {
            let a = a_mean + a_factor.matmul(tape.constant(randn(rng, a_mean.rows())));
            draws.push(y_draw(&bm, a, rng));
        }
    }
    Ok(out)
}

/// Forecast at `horizon` times after the last observed context time.
///
/// Means and standard deviations come from the predicted marginals. Each
/// sample trajectory draws the state at the last observation from the
/// filtered belief, then at every horizon time from the one-interval
/// predict started at the previously drawn state.
pub fn forecast<R: Rng>(
    model: &Model,
    store: &ParamStore,
    context: &IrregularSeries,
    horizon: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<Prediction> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let bm = model.bind(store, &bound);
    if context.observed_count() == 0 {
        return Err(Error::Empty("forecast context has no observed timesteps"));
    }
    let fr = filter_recognized(&bm, context, &[])?;
    let last = fr.last();
    let (t_last, filtered) = (last.time, last.filtered);
    if let Some(&t) = horizon.iter().find(|t| !(**t > t_last)) {
        return Err(Error::QueryOutOfSpan { time: t, start: t_last, end: f64::INFINITY });
    }
    if horizon.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("horizon times must increase".into()));
    }
    let mut out = Prediction { times: horizon.to_vec(), mean: vec![], std: vec![], samples: vec![] };
    let mut cache = HashMap::new();
    let (mut belief, mut t) = (filtered, t_last);
    for &tk in horizon {
        belief = predict(&bm.ssm.dynamics, &belief, t, tk - t, &bm.propagation, &mut cache)?.predicted;
        t = tk;
        let (a_mean, a_factor) = aux_marginal(&bm, &belief);
        let (mean, std) = y_summary(&bm, a_mean, a_factor);
        out.mean.push(mean);
        out.std.push(std);
    }
    let m = filtered.dim();
    let (m_last, l_last) = (filtered.mean.value(), filtered.factor.value());
    for _ in 0..n_samples {
        // A fresh tape per trajectory keeps memory bounded.
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let bm = model.bind(store, &bound);
        let mut cache = HashMap::new();
        let zero = tape.constant(Matrix::zeros(m, m));
        let mut z = &m_last + &l_last * randn(rng, m);
        let mut t = t_last;
        let mut draws = Vec::with_capacity(horizon.len());
        for &tk in horizon {
            let start = SqrtGaussian::new(tape.constant(z), zero);
            let step = predict(&bm.ssm.dynamics, &start, t, tk - t, &bm.propagation, &mut cache)?.predicted;
            z = step.mean.value() + step.factor.value() * randn(rng, m);
            t = tk;
            let a = bm.ssm.h.matmul(tape.constant(z.clone())) + bm.ssm.r_sqrt.matmul(tape.constant(randn(rng, bm.ssm.h.rows())));
            draws.push(y_draw(&bm, a, rng));
        }
        out.samples.push(draws);
    }
    Ok(out)
}

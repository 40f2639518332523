//! Imputation and forecast evaluation: task queries, prediction files and
//! mean squared error averaged over samples, then over sequences.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::config::DataConfig;
use crate::data::IrregularSeries;
use crate::error::{Error, Result};
use crate::model::{forecast, impute, noise_rng, Model, Prediction};
use crate::params::ParamStore;

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SAMPLES_FILE: &str = "samples.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Task {
    /// Predict every missing timestep from the observed ones.
    Impute,
    /// Predict the timesteps in `[context, context + horizon)` from those before `context`.
    Forecast { context: f64, horizon: Option<f64> },
}

impl Task {
    pub fn from_config(data: &DataConfig) -> Self {
        match data.context {
            Some(context) => Task::Forecast { context, horizon: data.horizon },
            None => Task::Impute,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Impute => "impute",
            Task::Forecast { .. } => "forecast",
        }
    }

    /// Times this task predicts on `series`.
    pub fn targets(self, series: &IrregularSeries) -> Vec<f64> {
        match self {
            Task::Impute => {
                let start = series.observations().next().map_or(f64::INFINITY, |(t, _)| t);
                series.times.iter().zip(&series.observed).filter(|(t, o)| !**o && **t >= start).map(|(t, _)| *t).collect()
            }
            Task::Forecast { context, horizon } => {
                let end = horizon.map_or(f64::INFINITY, |h| context + h - 1e-9 * (1.0 + context.abs()));
                series.times.iter().copied().filter(|t| *t >= context && *t < end).collect()
            }
        }
    }
}

/// Predictions for every sequence with at least one target, keyed by its
/// index. Sequence `i` draws from stream `i` of `seed`.
pub fn predict_all(
    model: &Model,
    store: &ParamStore,
    series: &[IrregularSeries],
    task: Task,
    n_samples: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Prediction>> {
    let results: Vec<Result<Option<(usize, Prediction)>>> = series
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let targets = task.targets(s);
            if targets.is_empty() {
                return Ok(None);
            }
            let mut rng = noise_rng(seed, i as u64);
            let p = match task {
                Task::Impute => impute(model, store, s, &targets, n_samples, &mut rng)?,
                Task::Forecast { context, .. } => forecast(model, store, &s.before(context), &targets, n_samples, &mut rng)?,
            };
            Ok(Some((i, p)))
        })
        .collect();
    let mut out = BTreeMap::new();
    for r in results {
        if let Some((i, p)) = r? {
            out.insert(i, p);
        }
    }
    Ok(out)
}

/// Squared error per sample averaged over times and dimensions, then over samples.
pub fn sample_mse(samples: &[Vec<Vec<f64>>], truth: &[Vec<f64>]) -> f64 {
    let per_sample = samples.iter().map(|draw| {
        let (sum, n) = draw
            .iter()
            .zip(truth)
            .flat_map(|(y, t)| y.iter().zip(t))
            .fold((0.0, 0usize), |(s, n), (y, t)| (s + (y - t) * (y - t), n + 1));
        sum / n as f64
    });
    per_sample.sum::<f64>() / samples.len() as f64
}

/// Truth values at `times`, or an error naming the first unmatched time.
fn aligned_truth(series: &IrregularSeries, times: &[f64], index: usize) -> Result<Vec<Vec<f64>>> {
    times
        .iter()
        .map(|&t| {
            let tol = 1e-9 * (1.0 + t.abs());
            let k = series.times.iter().position(|s| (s - t).abs() <= tol);
            match k.map(|k| &series.values[k]) {
                Some(v) if v.iter().all(|x| x.is_finite()) => Ok(v.clone()),
                _ => Err(Error::Misaligned(format!("sequence {index} has no ground truth at t = {t}"))),
            }
        })
        .collect()
}

/// MSE over all predicted sequences: per-sequence sample MSE, then the mean
/// over sequences.
pub fn score(predictions: &BTreeMap<usize, Prediction>, truth: &[IrregularSeries]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions to evaluate"));
    }
    let mut total = 0.0;
    for (&i, p) in predictions {
        let series = truth.get(i).ok_or_else(|| Error::Misaligned(format!("no ground-truth sequence {i}")))?;
        if p.samples.is_empty() {
            return Err(Error::Misaligned(format!("sequence {i} has no samples")));
        }
        if series.dim() != p.mean.first().map_or(0, Vec::len) {
            return Err(Error::Misaligned(format!("sequence {i} dimension differs from the ground truth")));
        }
        total += sample_mse(&p.samples, &aligned_truth(series, &p.times, i)?);
    }
    Ok(total / predictions.len() as f64)
}

fn header(prefix: &[&str], names: &[String]) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain(names.iter().cloned()).collect()
}

/// Writes `predictions.csv` (mean and std per target time) and
/// `samples.csv` (one row per draw and time).
pub fn write_predictions(dir: &Path, predictions: &BTreeMap<usize, Prediction>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = predictions.values().next().and_then(|p| p.mean.first()).map_or(0, Vec::len);
    let ys: Vec<String> = (1..=d).map(|j| format!("y{j}")).collect();
    let stds: Vec<String> = (1..=d).map(|j| format!("std{j}")).collect();
    let mut summary = csv::Writer::from_path(dir.join(PREDICTIONS_FILE))?;
    summary.write_record(header(&["series", "t"], &[ys.clone(), stds].concat()))?;
    let mut draws = csv::Writer::from_path(dir.join(SAMPLES_FILE))?;
    draws.write_record(header(&["series", "sample", "t"], &ys))?;
    for (i, p) in predictions {
        for (k, t) in p.times.iter().enumerate() {
            let row = [i.to_string(), t.to_string()].into_iter().chain(p.mean[k].iter().chain(&p.std[k]).map(f64::to_string));
            summary.write_record(row.collect::<Vec<_>>())?;
        }
        for (s, draw) in p.samples.iter().enumerate() {
            for (t, y) in p.times.iter().zip(draw) {
                let row = [i.to_string(), s.to_string(), t.to_string()].into_iter().chain(y.iter().map(f64::to_string));
                draws.write_record(row.collect::<Vec<_>>())?;
            }
        }
    }
    summary.flush()?;
    draws.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, column: usize, line: usize) -> Result<T> {
    let cell = rec.get(column).unwrap_or("").trim();
    cell.parse().map_err(|_| Error::UnparseableCell { line, column: column + 1, cell: cell.to_string() })
}

/// Reads back the files of [`write_predictions`].
pub fn read_predictions(dir: &Path) -> Result<BTreeMap<usize, Prediction>> {
    let mut out: BTreeMap<usize, Prediction> = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().from_path(dir.join(PREDICTIONS_FILE))?;
    let width = reader.headers()?.len();
    if width < 2 || width % 2 != 0 {
        return Err(Error::Misaligned(format!("{PREDICTIONS_FILE} needs series, t and paired y/std columns")));
    }
    let d = (width - 2) / 2;
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        if rec.len() != width {
            return Err(Error::RaggedRow { line, expected: width, found: rec.len() });
        }
        let i: usize = parse(&rec, 0, line)?;
        let values = (2..width).map(|c| parse::<f64>(&rec, c, line)).collect::<Result<Vec<_>>>()?;
        let p = out.entry(i).or_insert_with(|| Prediction { times: vec![], mean: vec![], std: vec![], samples: vec![] });
        p.times.push(parse(&rec, 1, line)?);
        p.mean.push(values[..d].to_vec());
        p.std.push(values[d..].to_vec());
    }
    let mut reader = csv::ReaderBuilder::new().from_path(dir.join(SAMPLES_FILE))?;
    let width = reader.headers()?.len();
    if width != d + 3 {
        return Err(Error::Misaligned(format!("{SAMPLES_FILE} has {} value columns, expected {d}", width.saturating_sub(3))));
    }
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        if rec.len() != width {
            return Err(Error::RaggedRow { line, expected: width, found: rec.len() });
        }
        let i: usize = parse(&rec, 0, line)?;
        let s: usize = parse(&rec, 1, line)?;
        let t: f64 = parse(&rec, 2, line)?;
        let y = (3..width).map(|c| parse::<f64>(&rec, c, line)).collect::<Result<Vec<_>>>()?;
        let p = out.get_mut(&i).ok_or_else(|| Error::Misaligned(format!("samples for unknown sequence {i}")))?;
        if s > p.samples.len() {
            return Err(Error::Misaligned(format!("line {line}: sample {s} out of order")));
        }
        if s == p.samples.len() {
            p.samples.push(vec![]);
        }
        let draw = &mut p.samples[s];
        if p.times.get(draw.len()) != Some(&t) {
            return Err(Error::Misaligned(format!("line {line}: sample time {t} does not match the prediction times")));
        }
        draw.push(y);
    }
    for (i, p) in &out {
        if p.samples.iter().any(|d| d.len() != p.times.len()) {
            return Err(Error::Misaligned(format!("sequence {i} has incomplete samples")));
        }
    }
    Ok(out)
}

//! Irregular time series, synthetic benchmark generators, missingness
//! masking and CSV I/O.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::{self, LinearGaussian};

/// A multivariate series on strictly increasing times with whole-vector
/// missingness. Values at unobserved times are kept (ground truth) when
/// known and are `NaN` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub observed: Vec<bool>,
}

impl IrregularSeries {
    /// A fully observed series.
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let observed = vec![true; times.len()];
        Self::with_mask(times, values, observed)
    }

    pub fn with_mask(times: Vec<f64>, values: Vec<Vec<f64>>, observed: Vec<bool>) -> Result<Self> {
        if times.len() != values.len() || times.len() != observed.len() {
            return Err(Error::InvalidGrid(format!(
                "{} times, {} values, {} mask entries",
                times.len(),
                values.len(),
                observed.len()
            )));
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::NonMonotoneTimes { line: i + 2 });
            }
        }
        let d = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidGrid("values have differing dimensions".into()));
        }
        for (v, o) in values.iter().zip(&observed) {
            if *o && v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGrid("observed value is not finite".into()));
            }
        }
        Ok(Self { times, values, observed })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    /// `(time, value)` pairs of the observed timesteps.
    pub fn observations(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.times
            .iter()
            .zip(&self.values)
            .zip(&self.observed)
            .filter(|(_, o)| **o)
            .map(|((t, v), _)| (*t, v.as_slice()))
    }

    /// Timesteps with `t < end`, preserving the mask.
    pub fn before(&self, end: f64) -> Self {
        let n = self.times.iter().take_while(|t| **t < end).count();
        self.prefix(n)
    }

    /// Timesteps with `t ≥ start`.
    pub fn from_time(&self, start: f64) -> Self {
        let skip = self.times.iter().take_while(|t| **t < start).count();
        Self {
            times: self.times[skip..].to_vec(),
            values: self.values[skip..].to_vec(),
            observed: self.observed[skip..].to_vec(),
        }
    }

    fn prefix(&self, n: usize) -> Self {
        Self { times: self.times[..n].to_vec(), values: self.values[..n].to_vec(), observed: self.observed[..n].to_vec() }
    }

    /// Same series with every timestep marked observed.
    pub fn fully_observed(&self) -> Self {
        Self { observed: vec![true; self.len()], ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    BouncingBall,
    DampedPendulum,
    ScalarLgssm,
}

impl Dataset {
    pub fn dim(self) -> usize {
        match self {
            Dataset::BouncingBall | Dataset::ScalarLgssm => 1,
            Dataset::DampedPendulum => 2,
        }
    }

    /// Default `(train, val, test)` sizes.
    pub fn default_splits(self) -> [usize; 3] {
        match self {
            Dataset::BouncingBall => [5000, 500, 500],
            Dataset::DampedPendulum => [5000, 1000, 1000],
            Dataset::ScalarLgssm => [500, 100, 100],
        }
    }

    /// Default sequence length in seconds.
    pub fn default_length(self) -> f64 {
        match self {
            Dataset::BouncingBall => 30.0,
            Dataset::DampedPendulum => 15.0,
            Dataset::ScalarLgssm => 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub dataset: Dataset,
    pub n_sequences: usize,
    /// Sequence length in seconds.
    pub length: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub missing: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    0.1
}

fn default_noise() -> f64 {
    0.05
}

impl GeneratorConfig {
    pub fn new(dataset: Dataset, n_sequences: usize, seed: u64) -> Self {
        Self {
            dataset,
            n_sequences,
            length: dataset.default_length(),
            dt: default_dt(),
            noise_std: default_noise(),
            missing: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("generator.dt", "must be positive"));
        }
        if !(self.length >= self.dt) {
            return Err(Error::config("generator.length", "must cover at least one step"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("generator.noise_std", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.missing) {
            return Err(Error::config("generator.missing", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.length / self.dt).round() as usize
    }
}

/// Parameters of the scalar linear-Gaussian generator.
pub const LGSSM_F: f64 = -0.5;
pub const LGSSM_Q: f64 = 0.2;
pub const LGSSM_R: f64 = 0.1;

pub const GRAVITY: f64 = 9.81;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_DAMPING: f64 = 0.25;

/// One explicit Euler step of the ball with elastic walls at ±1.
pub fn ball_step(x: f64, v: f64, dt: f64) -> (f64, f64) {
    let x = x + v * dt;
    if x > 1.0 {
        (2.0 - x, -v)
    } else if x < -1.0 {
        (-2.0 - x, -v)
    } else {
        (x, v)
    }
}

/// `(dθ/dt, dω/dt)` of the damped pendulum.
pub fn pendulum_field(theta: f64, omega: f64) -> (f64, f64) {
    (omega, -(GRAVITY / PENDULUM_LENGTH) * theta.sin() - (PENDULUM_DAMPING / PENDULUM_MASS) * omega)
}

pub fn pendulum_rk4(theta: f64, omega: f64, dt: f64) -> (f64, f64) {
    let (k1t, k1w) = pendulum_field(theta, omega);
    let (k2t, k2w) = pendulum_field(theta + 0.5 * dt * k1t, omega + 0.5 * dt * k1w);
    let (k3t, k3w) = pendulum_field(theta + 0.5 * dt * k2t, omega + 0.5 * dt * k2w);
    let (k4t, k4w) = pendulum_field(theta + dt * k3t, omega + dt * k3w);
    (theta + dt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t), omega + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w))
}

pub fn pendulum_energy(theta: f64, omega: f64) -> f64 {
    0.5 * omega * omega + GRAVITY / PENDULUM_LENGTH * (1.0 - theta.cos())
}

/// Noiseless latent trajectories `(θ, ω)` or `(x, v)` plus observations.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub states: Vec<[f64; 2]>,
    pub series: IrregularSeries,
}

fn grid(config: &GeneratorConfig) -> Vec<f64> {
    (0..config.steps()).map(|k| k as f64 * config.dt).collect()
}

fn noisy<R: Rng>(clean: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    clean.iter().map(|c| c + std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn gen_ball<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Simulated {
    let mut x = Uniform::new(-1.0, 1.0).unwrap().sample(rng);
    let speed = Uniform::new(0.05, 0.5).unwrap().sample(rng);
    let mut v = if rng.random::<bool>() { speed } else { -speed };
    let times = grid(config);
    let mut states = Vec::with_capacity(times.len());
    let mut values = Vec::with_capacity(times.len());
    for _ in &times {
        states.push([x, v]);
        values.push(noisy(&[x], config.noise_std, rng));
        (x, v) = ball_step(x, v, config.dt);
    }
    Simulated { states, series: IrregularSeries { observed: vec![true; times.len()], times, values } }
}

fn clipped_normal<R: Rng>(rng: &mut R) -> f64 {
    let e: f64 = StandardNormal.sample(rng);
    e.clamp(-2.0, 2.0)
}

fn gen_pendulum<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Simulated {
    let mut theta = PI + clipped_normal(rng);
    let mut omega = 4.0 * clipped_normal(rng);
    let times = grid(config);
    let mut states = Vec::with_capacity(times.len());
    let mut values = Vec::with_capacity(times.len());
    for _ in &times {
        states.push([theta, omega]);
        values.push(noisy(&[theta.sin(), -theta.cos()], config.noise_std, rng));
        (theta, omega) = pendulum_rk4(theta, omega, config.dt);
    }
    Simulated { states, series: IrregularSeries { observed: vec![true; times.len()], times, values } }
}

/// The scalar generator's model: `F = −0.5`, `Q = 0.2`, `R = 0.1`,
/// `z₀ ~ N(0, 1)`.
pub fn lgssm_model() -> LinearGaussian {
    LinearGaussian::scalar(LGSSM_F, LGSSM_Q, LGSSM_R, 0.0, 1.0)
}

fn gen_lgssm<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Simulated {
    let model = lgssm_model();
    let (phi, qd) = reference::discretize(&model.f, &model.q, config.dt);
    let (phi, qd_std) = (phi[(0, 0)], qd[(0, 0)].sqrt());
    let obs = Normal::new(0.0, LGSSM_R.sqrt()).unwrap();
    let mut z: f64 = StandardNormal.sample(rng);
    let times = grid(config);
    let mut states = Vec::with_capacity(times.len());
    let mut values = Vec::with_capacity(times.len());
    for _ in &times {
        states.push([z, 0.0]);
        values.push(vec![z + obs.sample(rng)]);
        z = phi * z + qd_std * Distribution::<f64>::sample(&StandardNormal, rng);
    }
    Simulated { states, series: IrregularSeries { observed: vec![true; times.len()], times, values } }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates `config.n_sequences` complete series, then applies the
/// configured missingness.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<Simulated>> {
    config.validate()?;
    let mut rng = rng_for(config.seed, 0);
    let mut out: Vec<Simulated> = (0..config.n_sequences)
        .map(|_| match config.dataset {
            Dataset::BouncingBall => gen_ball(config, &mut rng),
            Dataset::DampedPendulum => gen_pendulum(config, &mut rng),
            Dataset::ScalarLgssm => gen_lgssm(config, &mut rng),
        })
        .collect();
    let masked = apply_missingness(out.iter().map(|s| s.series.clone()).collect(), config.missing, config.seed)?;
    for (sim, series) in out.iter_mut().zip(masked) {
        sim.series = series;
    }
    Ok(out)
}

/// Drops every non-initial timestep independently with probability `p`.
pub fn apply_missingness(mut series: Vec<IrregularSeries>, p: f64, seed: u64) -> Result<Vec<IrregularSeries>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("missing", "must lie in [0, 1)"));
    }
    let mut rng = rng_for(seed, 1);
    for s in &mut series {
        for (k, o) in s.observed.iter_mut().enumerate() {
            let keep = rng.random::<f64>() >= p;
            *o = k == 0 || keep;
        }
    }
    Ok(series)
}

/// Writes series as CSV with header `series,t,y1..yd`. Unobserved
/// timesteps are written with empty value cells unless `with_missing_values`
/// is set, in which case their (ground-truth) values are written too.
pub fn write_csv(path: &Path, series: &[IrregularSeries], with_missing_values: bool) -> Result<()> {
    let d = series.first().map_or(0, IrregularSeries::dim);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["series".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for (i, s) in series.iter().enumerate() {
        for ((t, v), o) in s.times.iter().zip(&s.values).zip(&s.observed) {
            let mut row = vec![i.to_string(), format_f64(*t)];
            if *o || with_missing_values {
                row.extend(v.iter().map(|x| format_f64(*x)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Reads series written by [`write_csv`]. The `series` column is optional
/// (a file without it holds one series); a row whose value cells are all
/// empty marks that timestep missing.
pub fn read_csv(path: &Path) -> Result<Vec<IrregularSeries>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let has_id = header.first().map(String::as_str) == Some("series");
    let t_col = usize::from(has_id);
    if header.get(t_col).map(String::as_str) != Some("t") {
        return Err(Error::UnparseableCell { line: 1, column: t_col + 1, cell: header.get(t_col).cloned().unwrap_or_default() });
    }
    let d = header.len() - t_col - 1;
    let mut groups: BTreeMap<u64, IrregularSeries> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::RaggedRow { line, expected: header.len(), found: rec.len() });
        }
        let cell = |c: usize| -> Result<f64> {
            let s = rec[c].trim();
            s.parse::<f64>().map_err(|_| Error::UnparseableCell { line, column: c + 1, cell: s.to_string() })
        };
        let id = if has_id {
            let s = rec[0].trim();
            s.parse::<u64>().map_err(|_| Error::UnparseableCell { line, column: 1, cell: s.to_string() })?
        } else {
            0
        };
        let t = cell(t_col)?;
        let empty = (t_col + 1..header.len()).all(|c| rec[c].trim().is_empty());
        let value = if empty {
            vec![f64::NAN; d]
        } else {
            (t_col + 1..header.len()).map(cell).collect::<Result<Vec<_>>>()?
        };
        let s = groups.entry(id).or_insert_with(|| {
            order.push(id);
            IrregularSeries { times: vec![], values: vec![], observed: vec![] }
        });
        if let Some(last) = s.times.last() {
            if !(t > *last) {
                return Err(Error::NonMonotoneTimes { line });
            }
        }
        s.times.push(t);
        s.values.push(value);
        s.observed.push(!empty);
    }
    Ok(order.into_iter().map(|id| groups.remove(&id).expect("grouped series")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: String,
    pub n_sequences: usize,
    /// Series with missing timesteps blanked.
    pub observed: String,
    /// Complete noisy series.
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: Dataset,
    pub d: usize,
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub splits: Vec<SplitEntry>,
}

/// Generates the named splits into `dir` and writes `manifest.json`.
pub fn generate_splits(dir: &Path, base: &GeneratorConfig, splits: &[(&str, usize)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (name, n)) in splits.iter().enumerate() {
        let config = GeneratorConfig { n_sequences: *n, seed: base.seed.wrapping_add(i as u64 * 1_000_003), ..base.clone() };
        let series: Vec<IrregularSeries> = generate(&config)?.into_iter().map(|s| s.series).collect();
        let observed = format!("{name}.csv");
        let truth = format!("{name}_truth.csv");
        write_csv(&dir.join(&observed), &series, false)?;
        write_csv(&dir.join(&truth), &series, true)?;
        entries.push(SplitEntry { split: name.to_string(), n_sequences: *n, observed, truth });
    }
    let manifest = Manifest { dataset: base.dataset, d: base.dataset.dim(), generator: base.clone(), seed: base.seed, splits: entries };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

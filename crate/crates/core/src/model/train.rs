use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{noise_rng, ElboReport, Model, SSM_PREFIX};
use crate::autodiff::Tape;
use crate::data::IrregularSeries;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// `ssm.` parameters stay fixed while `step < freeze_ssm_steps`.
    #[serde(default)]
    pub freeze_ssm_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// ELBO samples per sequence and step.
    #[serde(default = "default_samples")]
    pub elbo_samples: usize,
    /// Rescale the gradient to at most this global norm.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_lr() -> f64 {
    0.01
}

fn default_decay_rate() -> f64 {
    0.9
}

fn default_decay_every() -> usize {
    500
}

fn default_batch() -> usize {
    50
}

fn default_steps() -> usize {
    2000
}

fn default_samples() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            decay_rate: default_decay_rate(),
            decay_every: default_decay_every(),
            batch_size: default_batch(),
            steps: default_steps(),
            freeze_ssm_steps: 0,
            seed: 0,
            elbo_samples: default_samples(),
            clip_grad_norm: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("train.decay_rate", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("train.decay_every", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.elbo_samples == 0 {
            return Err(Error::config("train.elbo_samples", "must be at least 1"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_grad_norm", "must be positive"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("train.checkpoint_every", "must be at least 1"));
        }
        Ok(())
    }

    /// `lr · rate^⌊step / every⌋`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay_rate.powi((step / self.decay_every) as i32)
    }
}

/// Adam moments with a per-parameter step count, so parameters that sat
/// out a freeze window get their own bias correction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub first: BTreeMap<String, Matrix>,
    pub second: BTreeMap<String, Matrix>,
    pub counts: BTreeMap<String, u64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    /// Gradient-ascent step on `value` along `grad`.
    pub fn ascend(&mut self, name: &str, value: &mut Matrix, grad: &Matrix, lr: f64) {
        let m = self.first.entry(name.to_string()).or_insert_with(|| Matrix::zeros(grad.nrows(), grad.ncols()));
        let v = self.second.entry(name.to_string()).or_insert_with(|| Matrix::zeros(grad.nrows(), grad.ncols()));
        let t = self.counts.entry(name.to_string()).or_insert(0);
        *t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
        for i in 0..grad.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            value[i] += lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// One line of the metrics file; ELBO terms are batch means per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub elbo: f64,
    pub recon: f64,
    pub prior: f64,
    pub entropy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Optimizer state around a model and its parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, store: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, store, config, adam: Adam::default(), step: 0, rng })
    }

    pub fn frozen(&self, name: &str) -> bool {
        self.step < self.config.freeze_ssm_steps && name.starts_with(SSM_PREFIX)
    }

    /// Batch-mean ELBO and its gradient at the current parameters.
    pub fn batch_gradient(
        &self,
        batch: &[&IrregularSeries],
        noise_seed: u64,
    ) -> Result<(ElboReport, BTreeMap<String, Matrix>)> {
        let samples = self.config.elbo_samples;
        let weight = 1.0 / (batch.len() * samples) as f64;
        let per_sequence: Vec<Result<(ElboReport, BTreeMap<String, Matrix>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, series)| {
                let tape = Tape::new();
                let bound = self.store.bind(&tape);
                let bm = self.model.bind(&self.store, &bound);
                let mut rng = noise_rng(noise_seed, i as u64);
                let mut totals = Vec::with_capacity(samples);
                let mut report = ElboReport { total: 0.0, reconstruction: 0.0, prior: 0.0, entropy: 0.0 };
                for _ in 0..samples {
                    let e = bm.elbo(series, &mut rng)?;
                    let r = e.report();
                    report.total += r.total * weight;
                    report.reconstruction += r.reconstruction * weight;
                    report.prior += r.prior * weight;
                    report.entropy += r.entropy * weight;
                    totals.push((e.total, weight));
                }
                let objective = tape.lincomb(&totals);
                let grads = tape.backward(objective);
                Ok((report, bound.gradients(&grads)))
            })
            .collect();
        let mut report = ElboReport { total: 0.0, reconstruction: 0.0, prior: 0.0, entropy: 0.0 };
        let mut total: BTreeMap<String, Matrix> = BTreeMap::new();
        for item in per_sequence {
            let (r, g) = item?;
            report.total += r.total;
            report.reconstruction += r.reconstruction;
            report.prior += r.prior;
            report.entropy += r.entropy;
            for (k, v) in g {
                match total.get_mut(&k) {
                    Some(acc) => *acc += v,
                    None => {
                        total.insert(k, v);
                    }
                }
            }
        }
        Ok((report, total))
    }

    /// Draws a batch, evaluates the ELBO gradient and applies one Adam step.
    pub fn train_step(&mut self, data: &[IrregularSeries]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Empty("training set is empty"));
        }
        self.model.refresh_spectral(&mut self.store, 1);
        let batch: Vec<&IrregularSeries> = if self.config.batch_size >= data.len() {
            data.iter().collect()
        } else {
            let mut idx = sample(&mut self.rng, data.len(), self.config.batch_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &data[i]).collect()
        };
        let noise_seed: u64 = self.rng.random();
        let (report, mut grads) = self.batch_gradient(&batch, noise_seed)?;
        let finite = report.total.is_finite() && grads.values().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        grads.retain(|k, _| !self.frozen(k));
        let grad_norm = grads.values().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        if let Some(limit) = self.config.clip_grad_norm {
            if grad_norm > limit {
                for g in grads.values_mut() {
                    *g *= limit / grad_norm;
                }
            }
        }
        let lr = self.config.lr_at(self.step);
        for (name, g) in &grads {
            self.adam.ascend(name, self.store.get_mut(name), g, lr);
        }
        let metrics = StepMetrics {
            step: self.step,
            elbo: report.total,
            recon: report.reconstruction,
            prior: report.prior,
            entropy: report.entropy,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `config.steps`, calling `observe` after every step.
    /// A failing step leaves the parameters as they were before it.
    pub fn run<F>(&mut self, data: &[IrregularSeries], mut observe: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        while self.step < self.config.steps {
            let metrics = self.train_step(data)?;
            observe(self, &metrics)?;
        }
        Ok(())
    }
}

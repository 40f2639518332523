//! The NCDSSM: a continuous-discrete SSM over auxiliary variables `a`,
//! amortized recognition `q(a|y)`, an emission `p(y|a)`, and the ELBO that
//! ties them together.

mod predict;
mod train;

pub use predict::{forecast, impute, Prediction};
pub use train::{Adam, StepMetrics, TrainConfig, Trainer};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, inverse_softplus, GradCheckReport, Tape, Var};
use crate::data::IrregularSeries;
use crate::dynamics::{Dynamics, DynamicsConfig, Q_FLOOR};
use crate::error::{Error, Result};
use crate::filter::{filter, Event, Integrator, Propagation, SsmParams};
use crate::linalg::Matrix;
use crate::nn::{Activation, BoundHead, DiagGaussianHead, Mlp, MlpSpec};
use crate::params::{Bound, ParamStore};

pub const MU0: &str = "ssm.mu0";
pub const SIGMA0_RAW: &str = "ssm.sigma0_raw";
pub const H_MATRIX: &str = "ssm.h";
pub const R_RAW: &str = "ssm.r_raw";
/// Floor on the diagonal of `Σ₀^{1/2}`, so `Σ₀ ⪰ 1e-6·I`.
pub const SIGMA0_SQRT_FLOOR: f64 = 1e-3;
/// Floor added to every measurement variance.
pub const R_FLOOR: f64 = 1e-6;
/// Prefix of the parameters frozen during the warm-up window.
pub const SSM_PREFIX: &str = "ssm.";

const RECOGNITION: &str = "rec";
const EMISSION: &str = "emit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadConfig {
    /// Identity mean with a learned constant standard deviation.
    Identity {
        #[serde(default = "default_head_std")]
        std: f64,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_head_activation")]
        activation: Activation,
    },
}

fn default_head_std() -> f64 {
    0.1
}

fn default_head_activation() -> Activation {
    Activation::Softplus
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::Identity { std: default_head_std() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent state dimension `m`.
    pub state_dim: usize,
    /// Auxiliary dimension `h`.
    pub aux_dim: usize,
    /// Observation dimension `d`.
    pub obs_dim: usize,
    pub dynamics: DynamicsConfig,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub recognition: HeadConfig,
    #[serde(default)]
    pub emission: HeadConfig,
    /// Learn `H` instead of fixing it to the rectangular identity.
    #[serde(default)]
    pub learn_h: bool,
    #[serde(default = "default_r_init")]
    pub r_init: f64,
    #[serde(default = "default_sigma0_init")]
    pub sigma0_init: f64,
}

fn default_integrator() -> Integrator {
    Integrator::Rk4
}

fn default_eta() -> f64 {
    0.05
}

fn default_r_init() -> f64 {
    0.1
}

fn default_sigma0_init() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(state_dim: usize, aux_dim: usize, obs_dim: usize, dynamics: DynamicsConfig) -> Self {
        Self {
            state_dim,
            aux_dim,
            obs_dim,
            dynamics,
            integrator: default_integrator(),
            eta: default_eta(),
            recognition: HeadConfig::default(),
            emission: HeadConfig::default(),
            learn_h: false,
            r_init: default_r_init(),
            sigma0_init: default_sigma0_init(),
        }
    }

    /// Checks dimensions and option compatibility; errors name the key.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("model.state_dim", self.state_dim), ("model.aux_dim", self.aux_dim), ("model.obs_dim", self.obs_dim)] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.eta > 0.0) {
            return Err(Error::config("model.eta", "must be positive"));
        }
        if self.integrator == Integrator::AnalyticLti && !matches!(self.dynamics, DynamicsConfig::Lti { .. }) {
            return Err(Error::config("model.integrator", "analytic-lti requires lti dynamics"));
        }
        if let DynamicsConfig::LocallyLinear { k: 0, .. } = self.dynamics {
            return Err(Error::config("model.dynamics.k", "must be at least 1"));
        }
        for (key, head) in [("model.recognition", &self.recognition), ("model.emission", &self.emission)] {
            match head {
                HeadConfig::Identity { std } => {
                    if self.aux_dim != self.obs_dim {
                        return Err(Error::config(key, "identity head needs aux_dim == obs_dim"));
                    }
                    if !(*std > crate::nn::STD_FLOOR) {
                        return Err(Error::config(format!("{key}.std"), "must exceed the std floor 1e-3"));
                    }
                }
                HeadConfig::Mlp { hidden, .. } => {
                    if hidden.contains(&0) {
                        return Err(Error::config(format!("{key}.hidden"), "widths must be positive"));
                    }
                }
            }
        }
        if !(self.r_init > R_FLOOR) {
            return Err(Error::config("model.r_init", "must exceed 1e-6"));
        }
        if !(self.sigma0_init.sqrt() > SIGMA0_SQRT_FLOOR) {
            return Err(Error::config("model.sigma0_init", "must exceed 1e-6"));
        }
        Ok(())
    }

    pub fn propagation(&self) -> Propagation {
        Propagation::new(self.integrator, self.eta)
    }
}

fn head_spec(input: usize, hidden: &[usize], output: usize, activation: Activation) -> MlpSpec {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(2 * output);
    MlpSpec::new(widths, activation)
}

fn init_head<R: Rng>(
    prefix: &str,
    config: &HeadConfig,
    input: usize,
    output: usize,
    rng: &mut R,
    store: &mut ParamStore,
) -> DiagGaussianHead {
    match config {
        HeadConfig::Identity { std } => DiagGaussianHead::init_identity(prefix, output, *std, store),
        HeadConfig::Mlp { hidden, activation } => {
            DiagGaussianHead::init_mlp(prefix, input, hidden, output, *activation, rng, store)
        }
    }
}

fn attach_head(prefix: &str, config: &HeadConfig, input: usize, output: usize) -> DiagGaussianHead {
    match config {
        HeadConfig::Identity { .. } => DiagGaussianHead::Identity { raw_std: format!("{prefix}.raw_std") },
        HeadConfig::Mlp { hidden, activation } => {
            DiagGaussianHead::Mlp(Mlp::attach(prefix, head_spec(input, hidden, output, *activation)))
        }
    }
}

/// Structure of an NCDSSM; the numbers live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    dynamics: Dynamics,
    recognition: DiagGaussianHead,
    emission: DiagGaussianHead,
}

/// A model recorded on a tape.
pub struct BoundModel<'t> {
    pub ssm: SsmParams<'t>,
    pub recognition: BoundHead<'t>,
    pub emission: BoundHead<'t>,
    pub propagation: Propagation,
}

impl Model {
    /// Fresh parameters, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let (m, h, d) = (config.state_dim, config.aux_dim, config.obs_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert(MU0, Matrix::zeros(m, 1));
        let diag_raw = inverse_softplus(config.sigma0_init.sqrt() - SIGMA0_SQRT_FLOOR);
        store.insert(SIGMA0_RAW, Matrix::from_diagonal_element(m, m, diag_raw));
        if config.learn_h {
            store.insert(H_MATRIX, Matrix::identity(h, m));
        }
        store.insert(R_RAW, Matrix::from_element(h, 1, inverse_softplus(config.r_init - R_FLOOR)));
        let dynamics = Dynamics::init(&config.dynamics, m, &mut rng, &mut store);
        let recognition = init_head(RECOGNITION, &config.recognition, d, h, &mut rng, &mut store);
        let emission = init_head(EMISSION, &config.emission, h, d, &mut rng, &mut store);
        let model = Self { config: config.clone(), dynamics, recognition, emission };
        model.converge_spectral(&mut store);
        Ok((model, store))
    }

    /// Structure for parameters already present in a store (from a checkpoint).
    pub fn attach(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (m, h, d) = (config.state_dim, config.aux_dim, config.obs_dim);
        let model = Self {
            config: config.clone(),
            dynamics: Dynamics::attach(&config.dynamics, m),
            recognition: attach_head(RECOGNITION, &config.recognition, d, h),
            emission: attach_head(EMISSION, &config.emission, h, d),
        };
        let (_, reference) = Self::init(config, 0)?;
        let expected: BTreeMap<_, _> = reference.params().map(|(k, v)| (k.clone(), v.shape())).collect();
        for (name, shape) in &expected {
            match store.try_get(name) {
                Some(v) if v.shape() == *shape => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}, expected {shape:?}", v.shape())))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(model)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn propagation(&self) -> Propagation {
        self.config.propagation()
    }

    /// One power-iteration round for every spectrally normalized layer.
    pub fn refresh_spectral(&self, store: &mut ParamStore, iters: usize) {
        self.dynamics.refresh_spectral(store, iters);
        self.recognition.refresh_spectral(store, iters);
        self.emission.refresh_spectral(store, iters);
    }

    pub fn converge_spectral(&self, store: &mut ParamStore) {
        self.dynamics.converge_spectral(store);
        self.recognition.converge_spectral(store);
        self.emission.converge_spectral(store);
    }

    pub fn bind<'t>(&self, store: &ParamStore, bound: &Bound<'t>) -> BoundModel<'t> {
        let tape = bound.tape();
        let m = self.config.state_dim;
        let raw = bound.get(SIGMA0_RAW);
        let strict_lower = Matrix::from_fn(m, m, |i, j| if i > j { 1.0 } else { 0.0 });
        let sigma0_sqrt = raw.mask(strict_lower) + raw.diag().softplus().add_scalar(SIGMA0_SQRT_FLOOR).diag_embed();
        let h = if self.config.learn_h {
            bound.get(H_MATRIX)
        } else {
            tape.constant(Matrix::identity(self.config.aux_dim, m))
        };
        let r_sqrt = bound.get(R_RAW).softplus().add_scalar(R_FLOOR).sqrt().diag_embed();
        BoundModel {
            ssm: SsmParams { mu0: bound.get(MU0), sigma0_sqrt, h, r_sqrt, dynamics: self.dynamics.bind(store, bound) },
            recognition: self.recognition.bind(store, bound),
            emission: self.emission.bind(store, bound),
            propagation: self.propagation(),
        }
    }
}

/// ELBO terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Elbo<'t> {
    pub total: Var<'t>,
    /// `Σ log p(yₖ | ãₖ)`.
    pub reconstruction: Var<'t>,
    /// `log p(ã₀:T)` from the filter.
    pub prior: Var<'t>,
    /// `−Σ log q(ãₖ | yₖ)` at the sample.
    pub entropy: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub total: f64,
    pub reconstruction: f64,
    pub prior: f64,
    pub entropy: f64,
}

impl Elbo<'_> {
    pub fn report(&self) -> ElboReport {
        ElboReport {
            total: self.total.item(),
            reconstruction: self.reconstruction.item(),
            prior: self.prior.item(),
            entropy: self.entropy.item(),
        }
    }
}

impl<'t> BoundModel<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.ssm.mu0.tape()
    }

    pub fn obs_dim(&self) -> usize {
        self.emission_dim()
    }

    fn emission_dim(&self) -> usize {
        match &self.emission {
            BoundHead::Identity(std) => std.rows(),
            BoundHead::Mlp(mlp) => mlp.weights().last().map_or(0, |w| w.rows() / 2),
        }
    }

    /// `q(aₖ | yₖ)`.
    pub fn recognize(&self, y: &[f64]) -> crate::nn::DiagGaussian<'t> {
        let y = self.tape().constant(Matrix::from_column_slice(y.len(), 1, y));
        self.recognition.forward(y)
    }

    /// Single-sample ELBO over the observed timesteps of `series`.
    pub fn elbo<R: Rng>(&self, series: &IrregularSeries, rng: &mut R) -> Result<Elbo<'t>> {
        let tape = self.tape();
        let h = self.ssm.h.rows();
        let mut recon = Vec::new();
        let mut neg_logq = Vec::new();
        let mut events = Vec::new();
        for (t, y) in series.observations() {
            let y_var = tape.constant(Matrix::from_column_slice(y.len(), 1, y));
            let q = self.recognition.forward(y_var);
            let noise = Matrix::from_fn(h, 1, |_, _| StandardNormal.sample(rng));
            let a = q.sample(&noise);
            neg_logq.push((q.log_prob(a), -1.0));
            recon.push((self.emission.forward(a).log_prob(y_var), 1.0));
            events.push(Event { time: t, observation: Some(a) });
        }
        if events.is_empty() {
            return Err(Error::Empty("series has no observed timesteps"));
        }
        let prior = filter(&self.ssm, &events, &self.propagation)?.loglik;
        let reconstruction = tape.lincomb(&recon);
        let entropy = tape.lincomb(&neg_logq);
        let total = tape.lincomb(&[(reconstruction, 1.0), (prior, 1.0), (entropy, 1.0)]);
        Ok(Elbo { total, reconstruction, prior, entropy })
    }
}

/// Effective diffusion and measurement variances, for inspection.
pub fn noise_variances(store: &ParamStore) -> (Matrix, Matrix) {
    let sp = |m: &Matrix, floor: f64| m.map(|x| crate::autodiff::softplus(x) + floor);
    (sp(store.get(crate::dynamics::Q_RAW), Q_FLOOR), sp(store.get(R_RAW), R_FLOOR))
}

/// Finite-difference check of the full ELBO gradient with respect to every
/// parameter, with the sampling noise held fixed.
pub fn elbo_grad_check(
    model: &Model,
    store: &ParamStore,
    series: &IrregularSeries,
    noise_seed: u64,
    step: f64,
) -> Result<(GradCheckReport, Vec<String>)> {
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    let point: Vec<Matrix> = store.params().map(|(_, v)| v.clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(tape, names.iter().cloned().zip(vars.iter().copied()).collect());
            let bm = model.bind(store, &bound);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            Ok(bm.elbo(series, &mut rng)?.total)
        },
        &point,
        step,
    )?;
    Ok((report, names))
}

/// Noise stream `stream` of the generator seeded with `seed`.
pub fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests;

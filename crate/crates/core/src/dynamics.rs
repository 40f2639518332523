//! Drift and diffusion parameterizations of the latent SDE
//! `dz = f(z) dt + G dB` with `G = I` and diagonal `Q`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, Var};
use crate::linalg::Matrix;
use crate::nn::{self, Activation, BoundMlp, InitScheme, Mlp, MlpSpec};
use crate::params::{Bound, ParamStore};

/// Floor added to every diffusion variance.
pub const Q_FLOOR: f64 = 1e-6;
/// Initial diffusion variance.
pub const Q_INIT: f64 = 0.1;

pub(crate) const LTI_F: &str = "ssm.f";
pub(crate) const Q_RAW: &str = "ssm.q_raw";
const DRIFT_PREFIX: &str = "ssm.drift";
const ALPHA_PREFIX: &str = "ssm.alpha";

fn base_name(j: usize) -> String {
    format!("ssm.ll.f{j}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DynamicsConfig {
    Lti {
        #[serde(default = "default_lti_init")]
        init: InitScheme,
    },
    Nonlinear {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default)]
        activate_last: bool,
        #[serde(default)]
        spectral_norm: bool,
        #[serde(default = "default_nl_init")]
        init: InitScheme,
    },
    LocallyLinear {
        k: usize,
        #[serde(default = "default_hidden")]
        alpha_hidden: Vec<usize>,
        #[serde(default = "default_lti_init")]
        init: InitScheme,
    },
}

fn default_lti_init() -> InitScheme {
    InitScheme::Orthogonal
}

fn default_nl_init() -> InitScheme {
    InitScheme::DefaultUniform
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_activation() -> Activation {
    Activation::Softplus
}

/// Dynamics handle; tensors live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Lti,
    Nonlinear(Mlp),
    LocallyLinear { k: usize, alpha: Mlp },
}

fn nl_spec(m: usize, hidden: &[usize], activation: Activation, activate_last: bool, spectral_norm: bool) -> MlpSpec {
    let mut widths = vec![m];
    widths.extend_from_slice(hidden);
    widths.push(m);
    MlpSpec { widths, activation, activate_last, spectral_norm }
}

fn alpha_spec(m: usize, k: usize, hidden: &[usize]) -> MlpSpec {
    let mut widths = vec![m];
    widths.extend_from_slice(hidden);
    widths.push(k);
    MlpSpec::new(widths, Activation::Softplus)
}

fn transition_init<R: Rng>(m: usize, scheme: InitScheme, rng: &mut R) -> Matrix {
    match scheme {
        InitScheme::SkewSymmetric => nn::skew_symmetric(m, rng),
        InitScheme::ZeroLastLayer => Matrix::zeros(m, m),
        InitScheme::DefaultUniform => {
            let b = 1.0 / (m as f64).sqrt();
            Matrix::from_fn(m, m, |_, _| rng.random_range(-b..=b))
        }
        InitScheme::Orthogonal => nn::orthogonal(m, m, rng),
    }
}

impl Dynamics {
    /// Registers the drift tensors and the diffusion parameter.
    pub fn init<R: Rng>(config: &DynamicsConfig, m: usize, rng: &mut R, store: &mut ParamStore) -> Self {
        store.insert(Q_RAW, Matrix::from_element(m, 1, inverse_softplus(Q_INIT - Q_FLOOR)));
        match config {
            DynamicsConfig::Lti { init } => {
                store.insert(LTI_F, transition_init(m, *init, rng));
                Self::Lti
            }
            DynamicsConfig::Nonlinear { hidden, activation, activate_last, spectral_norm, init } => {
                let spec = nl_spec(m, hidden, *activation, *activate_last, *spectral_norm);
                Self::Nonlinear(Mlp::init(DRIFT_PREFIX, spec, *init, rng, store))
            }
            DynamicsConfig::LocallyLinear { k, alpha_hidden, init } => {
                assert!(*k >= 1, "locally-linear dynamics needs k >= 1");
                for j in 0..*k {
                    store.insert(base_name(j), transition_init(m, *init, rng));
                }
                let alpha = Mlp::init(ALPHA_PREFIX, alpha_spec(m, *k, alpha_hidden), InitScheme::DefaultUniform, rng, store);
                Self::LocallyLinear { k: *k, alpha }
            }
        }
    }

    /// Handle for tensors already present in a store.
    pub fn attach(config: &DynamicsConfig, m: usize) -> Self {
        match config {
            DynamicsConfig::Lti { .. } => Self::Lti,
            DynamicsConfig::Nonlinear { hidden, activation, activate_last, spectral_norm, .. } => {
                Self::Nonlinear(Mlp::attach(DRIFT_PREFIX, nl_spec(m, hidden, *activation, *activate_last, *spectral_norm)))
            }
            DynamicsConfig::LocallyLinear { k, alpha_hidden, .. } => {
                Self::LocallyLinear { k: *k, alpha: Mlp::attach(ALPHA_PREFIX, alpha_spec(m, *k, alpha_hidden)) }
            }
        }
    }

    pub fn refresh_spectral(&self, store: &mut ParamStore, iters: usize) {
        match self {
            Self::Nonlinear(mlp) => mlp.refresh_spectral(store, iters),
            Self::LocallyLinear { alpha, .. } => alpha.refresh_spectral(store, iters),
            Self::Lti => {}
        }
    }

    pub fn converge_spectral(&self, store: &mut ParamStore) {
        match self {
            Self::Nonlinear(mlp) => mlp.converge_spectral(store),
            Self::LocallyLinear { alpha, .. } => alpha.converge_spectral(store),
            Self::Lti => {}
        }
    }

    pub fn bind<'t>(&self, store: &ParamStore, bound: &Bound<'t>) -> BoundDynamics<'t> {
        let q_diag = bound.get(Q_RAW).softplus().add_scalar(Q_FLOOR);
        let d_sqrt = q_diag.sqrt().diag_embed();
        let drift = match self {
            Self::Lti => Drift::Lti(bound.get(LTI_F)),
            Self::Nonlinear(mlp) => Drift::Nonlinear(mlp.bind(store, bound)),
            Self::LocallyLinear { k, alpha } => Drift::LocallyLinear {
                bases: (0..*k).map(|j| bound.get(&base_name(j))).collect(),
                alpha: alpha.bind(store, bound),
            },
        };
        BoundDynamics { drift, q_diag, d_sqrt }
    }
}

#[derive(Clone)]
pub enum Drift<'t> {
    Lti(Var<'t>),
    Nonlinear(BoundMlp<'t>),
    LocallyLinear { bases: Vec<Var<'t>>, alpha: BoundMlp<'t> },
}

/// Dynamics recorded on a tape.
#[derive(Clone)]
pub struct BoundDynamics<'t> {
    pub drift: Drift<'t>,
    /// Diagonal of `Q` as a column vector.
    pub q_diag: Var<'t>,
    /// `D^{1/2} = diag(√Q)`.
    pub d_sqrt: Var<'t>,
}

impl<'t> BoundDynamics<'t> {
    /// Assembles dynamics from explicit pieces; `q_diag` is used as given.
    pub fn from_parts(drift: Drift<'t>, q_diag: Var<'t>) -> Self {
        Self { drift, q_diag, d_sqrt: q_diag.sqrt().diag_embed() }
    }

    pub fn dim(&self) -> usize {
        self.q_diag.rows()
    }

    /// The transition matrix when the drift is linear time-invariant.
    pub fn lti_matrix(&self) -> Option<Var<'t>> {
        match &self.drift {
            Drift::Lti(f) => Some(*f),
            _ => None,
        }
    }

    fn mixed_matrix(bases: &[Var<'t>], alpha: &BoundMlp<'t>, z: Var<'t>) -> Var<'t> {
        let weights = alpha.forward(z).t().softmax_rows();
        let tape = z.tape();
        if bases.len() == 1 {
            return weights.scale_by(bases[0]);
        }
        let terms: Vec<Var<'t>> =
            bases.iter().enumerate().map(|(j, f)| weights.slice(0, j, 1, 1).scale_by(*f)).collect();
        tape.lincomb(&terms.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>())
    }

    /// `f(z)`; the drift is time-invariant.
    pub fn drift(&self, z: Var<'t>) -> Var<'t> {
        match &self.drift {
            Drift::Lti(f) => f.matmul(z),
            Drift::Nonlinear(net) => net.forward(z),
            Drift::LocallyLinear { bases, alpha } => Self::mixed_matrix(bases, alpha, z).matmul(z),
        }
    }

    /// `f(z)` and the linearization used by the moment equations: the exact
    /// Jacobian for LTI and NL drifts, and `F(z)` for locally-linear drifts.
    pub fn drift_and_jacobian(&self, z: Var<'t>) -> (Var<'t>, Var<'t>) {
        match &self.drift {
            Drift::Lti(f) => (f.matmul(z), *f),
            Drift::Nonlinear(net) => net.forward_with_jacobian(z),
            Drift::LocallyLinear { bases, alpha } => {
                let fz = Self::mixed_matrix(bases, alpha, z);
                (fz.matmul(z), fz)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::linalg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn build(config: &DynamicsConfig, m: usize, seed: u64) -> (Dynamics, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dynamics::init(config, m, &mut rng, &mut store);
        (d, store)
    }

    #[test]
    fn lti_drift_and_jacobian() {
        let (dynamics, mut store) = build(&DynamicsConfig::Lti { init: InitScheme::Orthogonal }, 3, 0);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let bd = dynamics.bind(&store, &b);
        let z = tape.constant(Matrix::from_element(3, 1, 2.0));
        let (f, j) = bd.drift_and_jacobian(z);
        assert_eq!(j.value(), *store.get(LTI_F));
        assert_eq!(f.value(), store.get(LTI_F) * z.value());
        assert!((bd.q_diag.value().add_scalar(-Q_INIT)).amax() < 1e-12);

        *store.get_mut(LTI_F) = Matrix::zeros(3, 3);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let bd = dynamics.bind(&store, &b);
        assert_eq!(bd.drift(tape.constant(Matrix::from_element(3, 1, 2.0))).value(), Matrix::zeros(3, 1));
    }

    #[test]
    fn diffusion_sqrt_is_diagonal_root() {
        let tape = Tape::new();
        let q = tape.constant(Matrix::from_column_slice(2, 1, &[4.0, 1.0]));
        let bd = BoundDynamics::from_parts(Drift::Lti(tape.constant(Matrix::zeros(2, 2))), q);
        let d = bd.d_sqrt.value();
        assert_eq!(d, Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
        assert_eq!(&d * d.transpose(), Matrix::from_diagonal(&q.value().column(0).into_owned()));
    }

    #[test]
    fn single_base_locally_linear_ignores_alpha() {
        let config = DynamicsConfig::LocallyLinear { k: 1, alpha_hidden: vec![8], init: InitScheme::Orthogonal };
        let (dynamics, store) = build(&config, 3, 1);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let bd = dynamics.bind(&store, &b);
        let z = tape.constant(Matrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]));
        let expected = store.get(&base_name(0)) * z.value();
        assert!((bd.drift(z).value() - expected).amax() < 1e-15);
    }

    #[test]
    fn equal_bases_reduce_to_lti() {
        let config = DynamicsConfig::LocallyLinear { k: 4, alpha_hidden: vec![16], init: InitScheme::Orthogonal };
        let (dynamics, mut store) = build(&config, 3, 2);
        let f = store.get(&base_name(0)).clone();
        for j in 1..4 {
            *store.get_mut(&base_name(j)) = f.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let bd = dynamics.bind(&store, &b);
            let z0 = randn(&mut rng, 3, 1) * 3.0;
            let z = tape.constant(z0.clone());
            let (drift, jac) = bd.drift_and_jacobian(z);
            assert!((drift.value() - &f * &z0).amax() <= 1e-12);
            assert!((jac.value() - &f).amax() <= 1e-12);
        }
    }

    #[test]
    fn nonlinear_jacobian_first_order_consistency() {
        let config = DynamicsConfig::Nonlinear {
            hidden: vec![16],
            activation: Activation::Tanh,
            activate_last: true,
            spectral_norm: false,
            init: InitScheme::DefaultUniform,
        };
        let (dynamics, store) = build(&config, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eval = |z: &Matrix| {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let (f, j) = dynamics.bind(&store, &b).drift_and_jacobian(tape.constant(z.clone()));
            (f.value(), j.value())
        };
        for _ in 0..10 {
            let z = randn(&mut rng, 4, 1);
            let v = randn(&mut rng, 4, 1);
            let (f0, j) = eval(&z);
            let residual = |eps: f64| (eval(&(&z + &v * eps)).0 - &f0 - &j * &v * eps).norm();
            let (r1, r2) = (residual(1e-2), residual(5e-3));
            // Second order: halving ε quarters the residual.
            assert!(r2 < 0.3 * r1, "{r1} {r2}");
        }
    }

    #[test]
    fn nonlinear_single_linear_layer_jacobian_is_weight() {
        let config = DynamicsConfig::Nonlinear {
            hidden: vec![],
            activation: Activation::Softplus,
            activate_last: false,
            spectral_norm: false,
            init: InitScheme::DefaultUniform,
        };
        let (dynamics, store) = build(&config, 3, 6);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let (_, j) = dynamics.bind(&store, &b).drift_and_jacobian(tape.constant(Matrix::zeros(3, 1)));
        assert_eq!(j.value(), *store.get("ssm.drift.w0"));
    }

    #[test]
    fn spectral_normalized_drift_satisfies_exponential_bound() {
        let config = DynamicsConfig::Nonlinear {
            hidden: vec![32],
            activation: Activation::Softplus,
            activate_last: false,
            spectral_norm: true,
            init: InitScheme::DefaultUniform,
        };
        let (dynamics, mut store) = build(&config, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (_, w) in store.params_mut() {
            *w = randn(&mut rng, w.nrows(), w.ncols()) * 2.0;
        }
        dynamics.converge_spectral(&mut store);
        for _ in 0..100 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let (_, j) = dynamics.bind(&store, &b).drift_and_jacobian(tape.constant(randn(&mut rng, 4, 1) * 5.0));
            let bound = linalg::spectral_norm(&linalg::matrix_exponential(&j.value()), 100);
            assert!(bound <= std::f64::consts::E + 1e-3);
        }
    }
}

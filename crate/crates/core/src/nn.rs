//! Small multilayer perceptrons and diagonal Gaussian heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, Var};
use crate::linalg::{self, Matrix};
use crate::params::{Bound, ParamStore};

/// Lower bound on every standard deviation emitted by a Gaussian head.
pub const STD_FLOOR: f64 = 1e-3;

/// Power-iteration rounds used when a spectrally normalized layer is created.
pub const SPECTRAL_INIT_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Orthogonal weights; non-square weights get orthonormal rows or columns.
    Orthogonal,
    /// Weights drawn from `N(0,1)` and antisymmetrized.
    SkewSymmetric,
    /// Default uniform init with the final layer set to zero.
    ZeroLastLayer,
    /// `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    DefaultUniform,
}

/// Layer widths and per-network options, input width first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub activate_last: bool,
    #[serde(default)]
    pub spectral_norm: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self { widths, activation, activate_last: false, spectral_norm: false }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("mlp without layers")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// An MLP whose tensors live in a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    spec: MlpSpec,
}

fn weight_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.w{i}")
}

fn bias_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.b{i}")
}

fn sn_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.sn_u{i}"), format!("{prefix}.sn_v{i}"))
}

/// Matrix with orthonormal columns (rows ≥ cols) or rows (rows < cols).
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let (q, _) = linalg::householder_qr(&g);
    if tall {
        q
    } else {
        q.transpose()
    }
}

/// `(F − Fᵀ)/2` with `F` standard normal.
pub fn skew_symmetric<R: Rng>(n: usize, rng: &mut R) -> Matrix {
    let f = Matrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    (&f - f.transpose()) * 0.5
}

fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl Mlp {
    /// Creates and registers the network's tensors. Deterministic given `rng`.
    pub fn init<R: Rng>(
        prefix: impl Into<String>,
        spec: MlpSpec,
        scheme: InitScheme,
        rng: &mut R,
        store: &mut ParamStore,
    ) -> Self {
        assert!(spec.widths.len() >= 2, "an mlp needs at least one layer");
        let prefix = prefix.into();
        let layers = spec.layers();
        for i in 0..layers {
            let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let last = i + 1 == layers;
            let w = match scheme {
                InitScheme::Orthogonal => orthogonal(fan_out, fan_in, rng),
                InitScheme::SkewSymmetric if fan_in == fan_out => skew_symmetric(fan_in, rng),
                InitScheme::SkewSymmetric => orthogonal(fan_out, fan_in, rng),
                InitScheme::ZeroLastLayer if last => Matrix::zeros(fan_out, fan_in),
                InitScheme::ZeroLastLayer | InitScheme::DefaultUniform => uniform(fan_out, fan_in, bound, rng),
            };
            let b = match scheme {
                InitScheme::ZeroLastLayer if last => Matrix::zeros(fan_out, 1),
                InitScheme::ZeroLastLayer | InitScheme::DefaultUniform => uniform(fan_out, 1, bound, rng),
                InitScheme::Orthogonal | InitScheme::SkewSymmetric => Matrix::zeros(fan_out, 1),
            };
            if spec.spectral_norm {
                let (un, vn) = sn_names(&prefix, i);
                let mut u = Matrix::from_fn(fan_out, 1, |_, _| StandardNormal.sample(rng));
                let mut v = Matrix::zeros(fan_in, 1);
                u /= u.norm().max(1e-12);
                linalg::power_iteration_converged(&w, &mut u, &mut v, SPECTRAL_INIT_ITERS);
                store.insert_buffer(un, u);
                store.insert_buffer(vn, v);
            }
            store.insert(weight_name(&prefix, i), w);
            store.insert(bias_name(&prefix, i), b);
        }
        Self { prefix, spec }
    }

    /// Rebuilds a handle for tensors already present in a store.
    pub fn attach(prefix: impl Into<String>, spec: MlpSpec) -> Self {
        Self { prefix: prefix.into(), spec }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `iters` power-iteration rounds per layer on the current weights.
    pub fn refresh_spectral(&self, store: &mut ParamStore, iters: usize) {
        self.update_spectral(store, |w, u, v| {
            linalg::power_iteration(w, u, v, iters);
        });
    }

    /// Iterates every layer's singular vectors to convergence.
    pub fn converge_spectral(&self, store: &mut ParamStore) {
        self.update_spectral(store, |w, u, v| {
            linalg::power_iteration_converged(w, u, v, SPECTRAL_INIT_ITERS);
        });
    }

    fn update_spectral(&self, store: &mut ParamStore, step: impl Fn(&Matrix, &mut Matrix, &mut Matrix)) {
        if !self.spec.spectral_norm {
            return;
        }
        for i in 0..self.spec.layers() {
            let w = store.get(&weight_name(&self.prefix, i)).clone();
            let (un, vn) = sn_names(&self.prefix, i);
            let mut u = store.buffer(&un).clone();
            let mut v = store.buffer(&vn).clone();
            step(&w, &mut u, &mut v);
            *store.buffer_mut(&un) = u;
            *store.buffer_mut(&vn) = v;
        }
    }

    /// Effective weights as plain matrices (spectral normalization applied).
    pub fn effective_weights(&self, store: &ParamStore) -> Vec<Matrix> {
        (0..self.spec.layers())
            .map(|i| {
                let w = store.get(&weight_name(&self.prefix, i));
                if self.spec.spectral_norm {
                    let (un, vn) = sn_names(&self.prefix, i);
                    let sigma = (store.buffer(&un).transpose() * w * store.buffer(&vn))[(0, 0)];
                    w / sigma.max(1.0)
                } else {
                    w.clone()
                }
            })
            .collect()
    }

    /// Records the effective weights on the tape of `bound`.
    pub fn bind<'t>(&self, store: &ParamStore, bound: &Bound<'t>) -> BoundMlp<'t> {
        let tape = bound.tape();
        let layers = (0..self.spec.layers())
            .map(|i| {
                let w = bound.get(&weight_name(&self.prefix, i));
                let b = bound.get(&bias_name(&self.prefix, i));
                let w = if self.spec.spectral_norm {
                    let (un, vn) = sn_names(&self.prefix, i);
                    let u = tape.constant(store.buffer(&un).clone());
                    let v = tape.constant(store.buffer(&vn).clone());
                    let sigma = u.t().matmul(w).matmul(v);
                    if sigma.item() > 1.0 {
                        sigma.recip().scale_by(w)
                    } else {
                        w
                    }
                } else {
                    w
                };
                (w, b)
            })
            .collect();
        BoundMlp { layers, activation: self.spec.activation, activate_last: self.spec.activate_last }
    }
}

/// An MLP recorded on a tape.
#[derive(Clone)]
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
    activate_last: bool,
}

impl<'t> BoundMlp<'t> {
    /// A single linear layer `x ↦ w x + b`.
    pub fn linear(w: Var<'t>, b: Var<'t>) -> Self {
        Self { layers: vec![(w, b)], activation: Activation::None, activate_last: false }
    }

    pub fn weights(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.layers.iter().map(|(w, _)| *w)
    }

    fn activated(&self, i: usize) -> bool {
        self.activation != Activation::None && (i + 1 < self.layers.len() || self.activate_last)
    }

    fn act(&self, x: Var<'t>) -> Var<'t> {
        match self.activation {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
            Activation::None => x,
        }
    }

    /// Derivative of the activation at the pre-activation `x` (given `y = act(x)`).
    fn act_slope(&self, x: Var<'t>, y: Var<'t>) -> Var<'t> {
        match self.activation {
            Activation::Tanh => (-y.square()).add_scalar(1.0),
            Activation::Softplus => x.sigmoid(),
            Activation::None => unreachable!("identity has no recorded slope"),
        }
    }

    /// Applies the network to a column vector (or to each column of a matrix).
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = affine(*w, *b, h);
            if self.activated(i) {
                h = self.act(h);
            }
        }
        h
    }

    /// Output and Jacobian at a column vector, both recorded on the tape.
    ///
    /// The Jacobian is the chain-rule product `Wₗ·diag(σ′)·…·diag(σ′)·W₁`,
    /// so it is itself differentiable with respect to the weights.
    pub fn forward_with_jacobian(&self, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        assert_eq!(x.cols(), 1, "jacobian needs a single column input");
        let mut h = x;
        let mut jac: Option<Var<'t>> = None;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let pre = affine(*w, *b, h);
            let mut j = match jac {
                Some(j) => w.matmul(j),
                None => *w,
            };
            h = if self.activated(i) {
                let post = self.act(pre);
                j = self.act_slope(pre, post).diag_mul(j);
                post
            } else {
                pre
            };
            jac = Some(j);
        }
        (h, jac.expect("mlp without layers"))
    }
}

fn affine<'t>(w: Var<'t>, b: Var<'t>, x: Var<'t>) -> Var<'t> {
    let wx = w.matmul(x);
    if x.cols() == 1 {
        wx + b
    } else {
        let tape = x.tape();
        let ones = tape.constant(Matrix::from_element(1, x.cols(), 1.0));
        wx + b.matmul(ones)
    }
}

/// Mean and standard deviation of a diagonal Gaussian, as column vectors.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mean: Var<'t>,
    pub std: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    /// `mean + std ∘ noise` with `noise` recorded as a constant.
    pub fn sample(&self, noise: &Matrix) -> Var<'t> {
        sample_diag_gaussian(self.mean, self.std, noise)
    }

    pub fn log_prob(&self, x: Var<'t>) -> Var<'t> {
        x.tape().gaussian_logpdf(x, self.mean, self.std)
    }
}

pub fn sample_diag_gaussian<'t>(mean: Var<'t>, std: Var<'t>, noise: &Matrix) -> Var<'t> {
    assert_eq!(mean.shape(), noise.shape(), "noise shape must match the mean");
    mean + std.mask(noise.clone())
}

/// `softplus(raw) + STD_FLOOR`.
pub fn std_from_raw(raw: Var<'_>) -> Var<'_> {
    raw.softplus().add_scalar(STD_FLOOR)
}

/// Raw value whose standard deviation is `std`.
pub fn raw_from_std(std: f64) -> f64 {
    inverse_softplus((std - STD_FLOOR).max(1e-12))
}

/// Conditional diagonal Gaussian `x ↦ N(μ(x), diag σ(x)²)`.
///
/// Either an MLP emitting `2·out` values (mean, then raw scale) or the
/// literal identity mean with a learned input-independent scale.
#[derive(Debug, Clone, PartialEq)]
pub enum DiagGaussianHead {
    Mlp(Mlp),
    Identity { raw_std: String },
}

impl DiagGaussianHead {
    pub fn init_mlp<R: Rng>(
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
        store: &mut ParamStore,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(2 * output);
        let spec = MlpSpec::new(widths, activation);
        Self::Mlp(Mlp::init(prefix, spec, InitScheme::DefaultUniform, rng, store))
    }

    pub fn init_identity(prefix: &str, dim: usize, std: f64, store: &mut ParamStore) -> Self {
        let raw_std = format!("{prefix}.raw_std");
        store.insert(raw_std.clone(), Matrix::from_element(dim, 1, raw_from_std(std)));
        Self::Identity { raw_std }
    }

    pub fn bind<'t>(&self, store: &ParamStore, bound: &Bound<'t>) -> BoundHead<'t> {
        match self {
            Self::Mlp(mlp) => BoundHead::Mlp(mlp.bind(store, bound)),
            Self::Identity { raw_std } => BoundHead::Identity(std_from_raw(bound.get(raw_std))),
        }
    }

    pub fn refresh_spectral(&self, store: &mut ParamStore, iters: usize) {
        if let Self::Mlp(m) = self {
            m.refresh_spectral(store, iters);
        }
    }

    pub fn converge_spectral(&self, store: &mut ParamStore) {
        if let Self::Mlp(m) = self {
            m.converge_spectral(store);
        }
    }
}

#[derive(Clone)]
pub enum BoundHead<'t> {
    Mlp(BoundMlp<'t>),
    Identity(Var<'t>),
}

impl<'t> BoundHead<'t> {
    pub fn forward(&self, x: Var<'t>) -> DiagGaussian<'t> {
        match self {
            Self::Identity(std) => DiagGaussian { mean: x, std: *std },
            Self::Mlp(mlp) => {
                let out = mlp.forward(x);
                let n = out.rows() / 2;
                DiagGaussian { mean: out.slice(0, 0, n, 1), std: std_from_raw(out.slice(n, 0, n, 1)) }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{jacobian_by_backward, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(spec: MlpSpec, scheme: InitScheme, seed: u64) -> (Mlp, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::init("net", spec, scheme, &mut rng, &mut store);
        (mlp, store)
    }

    fn eval(mlp: &Mlp, store: &ParamStore, x: &Matrix) -> Matrix {
        let tape = Tape::new();
        let b = store.bind(&tape);
        mlp.bind(store, &b).forward(tape.constant(x.clone())).value()
    }

    #[test]
    fn zero_last_layer_with_tanh_outputs_zero() {
        let mut spec = MlpSpec::new(vec![3, 8, 3], Activation::Tanh);
        spec.activate_last = true;
        let (mlp, store) = net(spec, InitScheme::ZeroLastLayer, 0);
        assert_eq!(store.get("net.w1"), &Matrix::zeros(3, 8));
        assert_eq!(store.get("net.b1"), &Matrix::zeros(3, 1));
        let y = eval(&mlp, &store, &Matrix::from_element(3, 1, 0.7));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let (mlp, mut store) = net(MlpSpec::new(vec![3, 3], Activation::None), InitScheme::DefaultUniform, 1);
        *store.get_mut("net.w0") = Matrix::identity(3, 3);
        *store.get_mut("net.b0") = Matrix::zeros(3, 1);
        let x = Matrix::from_column_slice(3, 1, &[1.0, -2.0, 3.5]);
        assert_eq!(eval(&mlp, &store, &x), x);
    }

    #[test]
    fn orthogonal_init_gram_is_identity_and_deterministic() {
        let (_, store) = net(MlpSpec::new(vec![4, 4, 4], Activation::Tanh), InitScheme::Orthogonal, 5);
        let w = store.get("net.w0");
        assert!((w.transpose() * w - Matrix::identity(4, 4)).amax() < 1e-10);
        assert!((linalg::spectral_norm(w, 100) - 1.0).abs() < 1e-9);
        let (_, again) = net(MlpSpec::new(vec![4, 4, 4], Activation::Tanh), InitScheme::Orthogonal, 5);
        assert_eq!(store, again);
        let (_, rect) = net(MlpSpec::new(vec![3, 5], Activation::None), InitScheme::Orthogonal, 5);
        let w = rect.get("net.w0");
        assert!((w.transpose() * w - Matrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn spectral_normalization_divides_by_sigma() {
        let mut spec = MlpSpec::new(vec![2, 2], Activation::None);
        spec.spectral_norm = true;
        let (mlp, mut store) = net(spec, InitScheme::DefaultUniform, 2);
        *store.get_mut("net.w0") = Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        mlp.refresh_spectral(&mut store, SPECTRAL_INIT_ITERS);
        let w = &mlp.effective_weights(&store)[0];
        assert!((w - Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25])).amax() < 1e-9);

        *store.get_mut("net.w0") = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.2]);
        mlp.refresh_spectral(&mut store, SPECTRAL_INIT_ITERS);
        assert_eq!(mlp.effective_weights(&store)[0], *store.get("net.w0"));
    }

    #[test]
    fn spectral_normalized_weights_are_contractive() {
        for seed in 0..20 {
            let mut spec = MlpSpec::new(vec![4, 16, 4], Activation::Softplus);
            spec.spectral_norm = true;
            let (mlp, mut store) = net(spec, InitScheme::DefaultUniform, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for (_, w) in store.params_mut() {
                if w.ncols() > 1 {
                    *w = Matrix::from_fn(w.nrows(), w.ncols(), |_, _| StandardNormal.sample(&mut rng)) * 3.0;
                }
            }
            mlp.converge_spectral(&mut store);
            for w in mlp.effective_weights(&store) {
                let s = linalg::spectral_norm(&w, 200); assert!(s <= 1.0 + 1e-3, "seed {seed} {s}");
            }
            for _ in 0..20 {
                let x = Matrix::from_fn(4, 1, |_, _| StandardNormal.sample(&mut rng));
                let y = Matrix::from_fn(4, 1, |_, _| StandardNormal.sample(&mut rng));
                let d_out = (eval(&mlp, &store, &x) - eval(&mlp, &store, &y)).norm();
                assert!(d_out <= (1.0 + 1e-3f64).powi(2) * (&x - &y).norm());
            }
        }
    }

    #[test]
    fn recorded_jacobian_matches_backward_and_finite_differences() {
        for (activation, last) in [(Activation::Tanh, true), (Activation::Softplus, false), (Activation::Tanh, false)] {
            let mut spec = MlpSpec::new(vec![3, 7, 5, 3], activation);
            spec.activate_last = last;
            let (mlp, store) = net(spec, InitScheme::DefaultUniform, 3);
            let x0 = Matrix::from_column_slice(3, 1, &[0.3, -0.8, 1.1]);
            let tape = Tape::new();
            let b = store.bind(&tape);
            let bm = mlp.bind(&store, &b);
            let (_, jac) = bm.forward_with_jacobian(tape.constant(x0.clone()));
            let by_backward = jacobian_by_backward(
                |t, x| {
                    let b = store.bind(t);
                    mlp.bind(&store, &b).forward(x)
                },
                &x0,
            );
            assert!((jac.value() - &by_backward).amax() < 1e-12);
            let h = 1e-6;
            for j in 0..3 {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (eval(&mlp, &store, &xp) - eval(&mlp, &store, &xm)) / (2.0 * h);
                let col = jac.value().column(j).into_owned();
                assert!((fd - &col).norm() <= 1e-5 * col.norm().max(1.0));
            }
        }
    }

    #[test]
    fn gaussian_sampling_and_floor() {
        let tape = Tape::new();
        let mean = tape.constant(Matrix::from_column_slice(2, 1, &[1.0, -1.0]));
        let std = std_from_raw(tape.constant(Matrix::from_element(2, 1, -1e9)));
        assert!(std.value().iter().all(|s| *s == STD_FLOOR));
        let g = DiagGaussian { mean, std };
        assert_eq!(g.sample(&Matrix::zeros(2, 1)).value(), mean.value());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = 0.7;
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let t = Tape::new();
            let x = sample_diag_gaussian(
                t.constant(Matrix::zeros(1, 1)),
                t.constant(Matrix::from_element(1, 1, s)),
                &Matrix::from_element(1, 1, e),
            )
            .item();
            sum += x;
            sq += x * x;
        }
        let var = sq / n as f64 - (sum / n as f64).powi(2);
        assert!((var / (s * s) - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn identity_head_reproduces_input() {
        let mut store = ParamStore::new();
        let head = DiagGaussianHead::init_identity("rec", 2, 0.1, &mut store);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(Matrix::from_column_slice(2, 1, &[0.25, -4.0]));
        let q = head.bind(&store, &b).forward(x);
        assert_eq!(q.mean.value(), x.value());
        assert!(q.std.value().iter().all(|s| (s - 0.1).abs() < 1e-12));
    }
}

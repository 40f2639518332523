use super::*;
use crate::autodiff::inverse_softplus;
use crate::data::{Dataset, GeneratorConfig};
use crate::dynamics::Q_RAW;
use crate::nn::{raw_from_std, STD_FLOOR};
use crate::reference::{self, LinearGaussian};

fn lti_config(m: usize, h: usize) -> ModelConfig {
    let mut c = ModelConfig::new(m, h, h, DynamicsConfig::Lti { init: crate::nn::InitScheme::Orthogonal });
    c.integrator = Integrator::AnalyticLti;
    c
}

fn nl_config(m: usize, h: usize) -> ModelConfig {
    ModelConfig::new(
        m,
        h,
        h,
        DynamicsConfig::Nonlinear {
            hidden: vec![8],
            activation: Activation::Softplus,
            activate_last: false,
            spectral_norm: false,
            init: crate::nn::InitScheme::DefaultUniform,
        },
    )
}

/// Scalar identity-head model with the SSM set to `truth` and both head
/// standard deviations set to `std`.
fn scalar_model(truth: &LinearGaussian, std: f64) -> (Model, ParamStore) {
    let (model, mut store) = Model::init(&lti_config(1, 1), 0).unwrap();
    *store.get_mut(crate::dynamics::LTI_F) = truth.f.clone();
    *store.get_mut(Q_RAW) = truth.q.map(|q| inverse_softplus((q - Q_FLOOR).max(1e-12)));
    *store.get_mut(R_RAW) = truth.r.map(|r| inverse_softplus((r - R_FLOOR).max(1e-12)));
    *store.get_mut(MU0) = truth.mu0.clone();
    *store.get_mut(SIGMA0_RAW) = truth.sigma0.map(|s| inverse_softplus(s.sqrt() - SIGMA0_SQRT_FLOOR));
    for head in ["rec.raw_std", "emit.raw_std"] {
        *store.get_mut(head) = Matrix::from_element(1, 1, raw_from_std(std));
    }
    (model, store)
}

fn series(times: &[f64], values: &[f64]) -> IrregularSeries {
    IrregularSeries::new(times.to_vec(), values.iter().map(|v| vec![*v]).collect()).unwrap()
}

fn elbo_report(model: &Model, store: &ParamStore, s: &IrregularSeries, seed: u64) -> ElboReport {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let bm = model.bind(store, &bound);
    bm.elbo(s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().report()
}

#[test]
fn identity_recognition_returns_the_observation() {
    let (model, store) = Model::init(&lti_config(4, 2), 1).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let bm = model.bind(&store, &bound);
    let q = bm.recognize(&[0.3, -1.2]);
    assert_eq!(column(&q.mean.value()), vec![0.3, -1.2]);
    assert!(q.std.value().iter().all(|s| *s >= STD_FLOOR));
}

#[test]
fn mlp_recognition_maps_d_to_h() {
    let mut config = lti_config(4, 2);
    config.obs_dim = 5;
    config.recognition = HeadConfig::Mlp { hidden: vec![7], activation: Activation::Softplus };
    config.emission = HeadConfig::Mlp { hidden: vec![7], activation: Activation::Tanh };
    let (model, store) = Model::init(&config, 1).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let bm = model.bind(&store, &bound);
    let q = bm.recognize(&[0.1, 0.2, 0.3, 0.4, 0.5]);
    assert_eq!(q.mean.shape(), (2, 1));
    assert!(q.std.value().iter().all(|s| *s >= STD_FLOOR));
    assert_eq!(bm.obs_dim(), 5);
}

fn column(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

#[test]
fn config_validation_names_the_key() {
    let mut c = nl_config(3, 2);
    c.integrator = Integrator::AnalyticLti;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.integrator"));
    let mut c = lti_config(3, 2);
    c.obs_dim = 3;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.recognition"));
    let mut c = lti_config(3, 2);
    c.state_dim = 0;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.state_dim"));
}

#[test]
fn elbo_decomposes_and_is_deterministic() {
    let (model, store) = Model::init(&nl_config(3, 2), 2).unwrap();
    let s = IrregularSeries::with_mask(
        vec![0.0, 0.1, 0.25, 0.3],
        vec![vec![0.1, 0.2], vec![0.0, 0.1], vec![9.0, 9.0], vec![-0.2, 0.3]],
        vec![true, true, false, true],
    )
    .unwrap();
    let r = elbo_report(&model, &store, &s, 5);
    assert!((r.total - (r.reconstruction + r.prior + r.entropy)).abs() <= 1e-10 * r.total.abs().max(1.0));
    assert_eq!(r, elbo_report(&model, &store, &s, 5));
    assert_ne!(r, elbo_report(&model, &store, &s, 6));
    // The unobserved value has no influence.
    let mut other = s.clone();
    other.values[2] = vec![-4.0, 4.0];
    assert_eq!(r, elbo_report(&model, &store, &other, 5));
}

#[test]
fn identity_heads_make_the_bracket_vanish() {
    let truth = LinearGaussian::scalar(-0.5, 0.2, 0.1, 0.0, 1.0);
    let (model, store) = scalar_model(&truth, 0.05);
    let s = series(&[0.0, 0.4, 0.5, 1.1], &[0.3, 0.1, -0.2, 0.4]);
    let r = elbo_report(&model, &store, &s, 3);
    assert!((r.reconstruction + r.entropy).abs() < 1e-12);
}

/// With identity heads of std `σ`, `E[ELBO] = E[log N(y + σε; μ, Σ)]
/// = log N(y; μ, Σ) − ½σ² tr Σ⁻¹` for the joint auxiliary marginal `(μ, Σ)`.
#[test]
fn monte_carlo_elbo_matches_closed_form_and_bounds_the_likelihood() {
    let truth = LinearGaussian::scalar(-0.5, 0.2, 0.1, 0.0, 1.0);
    let times = [0.0, 0.3, 0.5, 1.0, 1.6];
    let values = [0.4, 0.1, 0.2, -0.3, -0.1];
    let s = series(&times, &values);
    let (mean, cov) = reference::scalar_marginal(&truth, &times);
    let y = Matrix::from_column_slice(5, 1, &values);
    let mut gaps = Vec::new();
    for std in [0.2, 0.05] {
        let (model, store) = scalar_model(&truth, std);
        let sigma = crate::autodiff::softplus(raw_from_std(std)) + STD_FLOOR;
        let draws: Vec<f64> = (0..10_000).map(|seed| elbo_report(&model, &store, &s, seed).total).collect();
        let n = draws.len() as f64;
        let mc = draws.iter().sum::<f64>() / n;
        let se = (draws.iter().map(|d| (d - mc).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let cov_inv = cov.clone().try_inverse().unwrap();
        let expected = reference::gaussian_logpdf(&y, &mean, &cov) - 0.5 * sigma * sigma * cov_inv.trace();
        assert!((mc - expected).abs() < 3.0 * se, "{mc} vs {expected} (se {se})");
        // The model's own marginal of y carries R + σ².
        let widened = LinearGaussian { r: truth.r.add_scalar(sigma * sigma), ..truth.clone() };
        let log_py = reference::scalar_marginal_loglik(&widened, &times, &values);
        assert!(mc <= log_py + 3.0 * se);
        gaps.push(log_py - mc);
    }
    assert!(gaps[1] < gaps[0]);
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let s = IrregularSeries::new(vec![0.0, 0.15], vec![vec![0.3, -0.1], vec![0.2, 0.05]]).unwrap();
    let (model, store) = Model::init(&lti_config(3, 2), 4).unwrap();
    let (report, _) = elbo_grad_check(&model, &store, &s, 9, 1e-6).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    let (model, store) = Model::init(&nl_config(3, 2), 4).unwrap();
    let (report, names) = elbo_grad_check(&model, &store, &s, 9, 1e-6).unwrap();
    assert!(report.max_rel_error <= 1e-3, "{report:?} {}", names[report.worst.0]);
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert!((c.lr_at(1000) - 0.01 * 0.81).abs() < 1e-15);
    assert_eq!(c.lr_at(499), 0.01);
    assert!((c.lr_at(500) - 0.009).abs() < 1e-15);
}

fn lgssm_data(n: usize, seed: u64) -> Vec<IrregularSeries> {
    let config = GeneratorConfig { length: 2.0, ..GeneratorConfig::new(Dataset::ScalarLgssm, n, seed) };
    crate::data::generate(&config).unwrap().into_iter().map(|s| s.series).collect()
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let (model, store) = Model::init(&lti_config(2, 1), 3).unwrap();
    let config = TrainConfig { steps: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, store.clone(), config).unwrap();
    trainer.run(&lgssm_data(4, 1), |_, _| Ok(())).unwrap();
    assert_eq!(trainer.store, store);
}

#[test]
fn freeze_window_keeps_ssm_parameters_bit_identical() {
    let (model, store) = Model::init(&lti_config(2, 1), 3).unwrap();
    let config = TrainConfig { steps: 6, freeze_ssm_steps: 4, batch_size: 3, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, store.clone(), config).unwrap();
    let data = lgssm_data(6, 2);
    for _ in 0..4 {
        trainer.train_step(&data).unwrap();
    }
    for (name, value) in store.params() {
        if name.starts_with(SSM_PREFIX) {
            assert_eq!(trainer.store.get(name), value, "{name}");
        } else {
            assert_ne!(trainer.store.get(name), value, "{name}");
        }
    }
    trainer.train_step(&data).unwrap();
    assert_ne!(trainer.store.get(crate::dynamics::LTI_F), store.get(crate::dynamics::LTI_F));
}

#[test]
fn training_is_deterministic_and_improves_the_elbo() {
    let data = lgssm_data(16, 3);
    let run = || {
        let (model, store) = Model::init(&lti_config(1, 1), 7).unwrap();
        let config = TrainConfig { steps: 60, batch_size: 8, lr: 0.02, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model, store, config).unwrap();
        let mut log = Vec::new();
        trainer
            .run(&data, |_, m| {
                log.push(*m);
                Ok(())
            })
            .unwrap();
        log
    };
    let log = run();
    assert_eq!(log, run());
    let early: f64 = log[..10].iter().map(|m| m.elbo).sum();
    let late: f64 = log[50..].iter().map(|m| m.elbo).sum();
    assert!(late > early, "{early} -> {late}");
}

#[test]
fn imputation_at_an_observation_with_tiny_noise_returns_it() {
    let truth = LinearGaussian::scalar(-0.3, 0.5, 1e-6, 0.0, 1.0);
    let (model, store) = scalar_model(&truth, 0.01);
    let s = series(&[0.0, 0.5, 1.0], &[0.2, 0.7, -0.1]);
    let p = impute(&model, &store, &s, &[0.5], 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((p.mean[0][0] - 0.7).abs() < 1e-4, "{:?}", p.mean);
    assert!(p.samples.is_empty());
}

#[test]
fn static_state_imputation_pools_all_observations() {
    let truth = LinearGaussian::scalar(0.0, 0.0, 0.5, 0.0, 2.0);
    let (model, store) = scalar_model(&truth, 0.01);
    let values = [0.4, 1.0, -0.2, 0.6];
    let s = series(&[0.0, 0.3, 1.0, 1.7], &values);
    let precision = 1.0 / 2.0 + 4.0 / 0.5;
    let pooled = values.iter().sum::<f64>() / 0.5 / precision;
    let p = impute(&model, &store, &s, &[0.1, 0.3, 1.35], 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for m in &p.mean {
        assert!((m[0] - pooled).abs() < 1e-4, "{} vs {pooled}", m[0]);
    }
    assert_eq!(p.samples.len(), 3);
    assert!(impute(&model, &store, &s, &[2.0], 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn scalar_forecast_matches_closed_form() {
    let truth = LinearGaussian::scalar(-0.7, 0.3, 0.05, 0.0, 1.0);
    let (model, store) = scalar_model(&truth, 0.02);
    let s = series(&[0.0, 0.2, 0.5], &[0.5, 0.4, 0.45]);
    let horizon = [0.7, 1.0, 1.5, 2.5];
    let p = forecast(&model, &store, &s, &horizon, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(p.samples.is_empty());
    let obs: Vec<_> = [0.5, 0.4, 0.45].iter().map(|v| Some(Matrix::from_element(1, 1, *v))).collect();
    let kf = reference::kalman_filter(&truth, &[0.0, 0.2, 0.5], &obs);
    let (m_t, p_t) = (kf.filtered[2].0[(0, 0)], kf.filtered[2].1[(0, 0)]);
    let sigma = crate::autodiff::softplus(raw_from_std(0.02)) + STD_FLOOR;
    let mut prev_std = 0.0;
    for (k, &t) in horizon.iter().enumerate() {
        let dt = t - 0.5;
        let mean = (-0.7 * dt).exp() * m_t;
        let e = (-1.4 * dt).exp();
        let var = e * p_t + 0.3 * (e - 1.0) / -1.4;
        assert!((p.mean[k][0] - mean).abs() < 1e-4);
        let std = (var + 0.05 + sigma * sigma).sqrt();
        assert!((p.std[k][0] - std).abs() < 1e-4);
        assert!(p.std[k][0] >= prev_std);
        prev_std = p.std[k][0];
    }
    assert!(forecast(&model, &store, &s, &[0.5], 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn frozen_dynamics_forecast_is_constant() {
    let truth = LinearGaussian::scalar(0.0, 0.0, 0.1, 0.0, 1.0);
    let (model, store) = scalar_model(&truth, 0.05);
    let s = series(&[0.0, 0.4], &[0.3, 0.5]);
    let p = forecast(&model, &store, &s, &[0.6, 1.0, 3.0], 200, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for m in &p.mean {
        assert!((m[0] - p.mean[0][0]).abs() < 1e-9);
    }
    assert_eq!(p.samples.len(), 200);
    assert_eq!(p.samples[0].len(), 3);
    let avg = p.samples.iter().map(|s| s[2][0]).sum::<f64>() / 200.0;
    assert!((avg - p.mean[2][0]).abs() < 4.0 * p.std[2][0] / 200f64.sqrt());
}

#[test]
fn forecast_samples_are_deterministic() {
    let (model, store) = Model::init(&nl_config(3, 1), 2).unwrap();
    let s = series(&[0.0, 0.1, 0.2], &[0.1, 0.2, 0.25]);
    let run = |seed| forecast(&model, &store, &s, &[0.3, 0.4], 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).samples, run(4).samples);
}

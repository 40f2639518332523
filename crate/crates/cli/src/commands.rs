use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ncdssm::checkpoint::Checkpoint;
use ncdssm::config::RunConfig;
use ncdssm::data::{generate_splits, read_csv, IrregularSeries};
use ncdssm::dynamics::DynamicsConfig;
use ncdssm::eval::{predict_all, read_predictions, score, write_predictions, Task};
use ncdssm::model::{elbo_grad_check, noise_rng, Model, StepMetrics, Trainer};
use ncdssm::{Error, Result};
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::Options;

pub const CONFIG_ECHO: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "metrics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

/// Largest toy instance `gradcheck` accepts.
const GRADCHECK_MAX_STATE: usize = 4;
const GRADCHECK_MAX_STEPS: usize = 5;
const GRADCHECK_STEP: f64 = 1e-6;

fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::config(key, "is required for this command"))
}

fn load_config(o: &Options) -> Result<RunConfig> {
    RunConfig::load(required(&o.config, "--config")?)
}

fn output_dir(o: &Options, config: &RunConfig) -> Result<PathBuf> {
    let dir = o
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::config("output_dir", "set output_dir or pass --out"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::write(dir.join(CONFIG_ECHO), config.to_json())?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_series(path: &Path, obs_dim: usize) -> Result<Vec<IrregularSeries>> {
    let series = read_csv(path)?;
    if series.is_empty() {
        return Err(Error::Empty("data file has no sequences"));
    }
    if let Some(s) = series.iter().find(|s| s.dim() != obs_dim) {
        return Err(Error::config("model.obs_dim", format!("is {obs_dim} but {} has {} value columns", path.display(), s.dim())));
    }
    Ok(series)
}

pub fn generate(o: &Options) -> Result<()> {
    let mut config = load_config(o)?;
    let g = config.generator.as_mut().ok_or_else(|| Error::config("generator", "is required for generate"))?;
    if let Some(seed) = o.seed {
        g.seed = seed;
    }
    let g = g.clone();
    let dir = output_dir(o, &config)?;
    let splits = g.split_sizes();
    let named: Vec<(&str, usize)> = splits.iter().map(|(n, k)| (n.as_str(), *k)).collect();
    let manifest = generate_splits(&dir, &g.base(), &named)?;
    echo_config(&dir, &config)?;
    for s in &manifest.splits {
        println!("{}: {} sequences -> {}", s.split, s.n_sequences, dir.join(&s.observed).display());
    }
    Ok(())
}

/// Keeps the metric lines of steps before `step`, so a resumed run
/// continues the file where the checkpoint left off.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.step < step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn train(o: &Options) -> Result<()> {
    let (mut config, mut trainer) = match &o.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut config = match &o.config {
                Some(_) => load_config(o)?,
                None => ckpt.config.clone(),
            };
            if config.model != ckpt.config.model {
                return Err(Error::config("model", "differs from the checkpoint's model"));
            }
            // The given config may extend the run; optimizer state comes from the checkpoint.
            let train = config.train.clone();
            let mut trainer = ckpt.into_trainer()?;
            trainer.config = train;
            config.train = trainer.config.clone();
            (config, trainer)
        }
        None => {
            let mut config = load_config(o)?;
            if let Some(seed) = o.seed {
                config.train.seed = seed;
            }
            let (model, store) = Model::init(&config.model, config.train.seed)?;
            let trainer = Trainer::new(model, store, config.train.clone())?;
            (config, trainer)
        }
    };
    let mut data = read_series(required(&config.data.train, "data.train")?, config.model.obs_dim)?;
    if let Some(w) = config.data.train_window {
        data = data.iter().map(|s| s.before(w)).collect();
    }
    if data.iter().any(|s| s.observed_count() == 0) {
        return Err(Error::config("data.train_window", "leaves a sequence without observed timesteps"));
    }
    let dir = output_dir(o, &config)?;
    config.output_dir = Some(dir.clone());
    echo_config(&dir, &config)?;
    let metrics_path = dir.join(METRICS_FILE);
    if trainer.step == 0 {
        File::create(&metrics_path)?;
    } else {
        truncate_metrics(&metrics_path, trainer.step)?;
    }
    let mut metrics = OpenOptions::new().append(true).create(true).open(&metrics_path)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let every = config.train.checkpoint_every;
    let result = trainer.run(&data, |t, m| {
        writeln!(metrics, "{}", serde_json::to_string(m)?)?;
        if every.is_some_and(|n| t.step % n == 0) {
            Checkpoint::from_trainer(&config, t).save(&ckpt_path)?;
        }
        if m.step % 100 == 0 {
            eprintln!("step {:>6}  elbo {:>12.4}  lr {:.2e}  |g| {:.3e}", m.step, m.elbo, m.lr, m.grad_norm);
        }
        Ok(())
    });
    metrics.flush()?;
    // A failed step leaves the parameters untouched, so this is the last good state.
    Checkpoint::from_trainer(&config, &trainer).save(&ckpt_path)?;
    result?;
    println!("trained to step {} -> {}", trainer.step, ckpt_path.display());
    Ok(())
}

pub fn predict(o: &Options, forecast: bool) -> Result<()> {
    let ckpt = Checkpoint::load(required(&o.checkpoint, "--checkpoint")?)?;
    let mut config = match &o.config {
        Some(_) => load_config(o)?,
        None => ckpt.config.clone(),
    };
    let model = ckpt.model()?;
    let task = if forecast {
        let context = *required(&config.data.context, "data.context")?;
        Task::Forecast { context, horizon: config.data.horizon }
    } else {
        Task::Impute
    };
    if let Some(n) = o.samples {
        if n == 0 {
            return Err(Error::config("--samples", "must be at least 1"));
        }
        config.eval.samples = n;
    }
    if let Some(seed) = o.seed {
        config.eval.seed = seed;
    }
    let test_path = required(&config.data.test, "data.test")?.clone();
    let test = read_series(&test_path, model.config.obs_dim)?;
    let predictions = predict_all(&model, &ckpt.store, &test, task, config.eval.samples, config.eval.seed)?;
    let dir = output_dir(o, &config)?;
    write_predictions(&dir, &predictions)?;
    echo_config(&dir, &config)?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &json!({
            "task": task.name(),
            "sequences": test.len(),
            "predicted_sequences": predictions.len(),
            "samples": config.eval.samples,
            "seed": config.eval.seed,
            "checkpoint_step": ckpt.step,
        }),
    )?;
    println!("{} predictions for {} sequences -> {}", task.name(), predictions.len(), dir.display());
    Ok(())
}

pub fn evaluate(o: &Options) -> Result<()> {
    let pred_dir = o.predictions.clone().or_else(|| o.out.clone()).ok_or_else(|| Error::config("--predictions", "pass --predictions or --out"))?;
    let config = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::load(&pred_dir.join(CONFIG_ECHO))?,
    };
    let truth_path = config.data.test_truth.as_ref().or(config.data.test.as_ref()).ok_or_else(|| Error::config("data.test_truth", "is required for evaluate"))?;
    let truth = read_series(truth_path, config.model.obs_dim)?;
    let predictions = read_predictions(&pred_dir)?;
    let mse = score(&predictions, &truth)?;
    let task = fs::read_to_string(pred_dir.join(SUMMARY_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v.get("task").and_then(|t| t.as_str()).map(str::to_string))
        .unwrap_or_else(|| "unknown".into());
    let dir = o.out.clone().unwrap_or(pred_dir);
    fs::create_dir_all(&dir)?;
    let report = json!({ "task": task, "mse": mse, "sequences": predictions.len() });
    write_json(&dir.join(EVAL_FILE), &report)?;
    println!("{task} mse {mse:.6} over {} sequences", predictions.len());
    Ok(())
}

/// First training sequence cut to the gradcheck size, or a seeded toy series.
fn gradcheck_series(config: &RunConfig, seed: u64) -> Result<IrregularSeries> {
    if let Some(path) = &config.data.train {
        let s = read_series(path, config.model.obs_dim)?.swap_remove(0);
        let observed: Vec<f64> = s.observations().map(|(t, _)| t).collect();
        return Ok(match observed.get(GRADCHECK_MAX_STEPS) {
            Some(end) => s.before(*end),
            None => s,
        });
    }
    let mut rng = noise_rng(seed, 0);
    let times = vec![0.0, 0.1, 0.25, 0.3, 0.5];
    let values: Vec<Vec<f64>> =
        times.iter().map(|_| (0..config.model.obs_dim).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect()).collect();
    IrregularSeries::new(times, values)
}

pub fn gradcheck(o: &Options) -> Result<()> {
    let config = load_config(o)?;
    if config.model.state_dim > GRADCHECK_MAX_STATE {
        return Err(Error::config("model.state_dim", format!("gradcheck needs at most {GRADCHECK_MAX_STATE} state dimensions")));
    }
    let seed = o.seed.unwrap_or(config.train.seed);
    let (model, store) = Model::init(&config.model, seed)?;
    let series = gradcheck_series(&config, seed)?;
    let (report, names) = elbo_grad_check(&model, &store, &series, seed, GRADCHECK_STEP)?;
    let tolerance = match config.model.dynamics {
        DynamicsConfig::Lti { .. } => 1e-4,
        _ => 1e-3,
    };
    let worst = &names[report.worst.0];
    let passed = report.max_rel_error <= tolerance;
    let summary = json!({
        "passed": passed,
        "max_rel_error": report.max_rel_error,
        "tolerance": tolerance,
        "worst_parameter": worst,
        "worst_entry": report.worst.1,
        "analytic": report.analytic,
        "numeric": report.numeric,
        "entries_checked": report.entries_checked,
        "timesteps": series.observed_count(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(dir) = o.out.clone().or(config.output_dir.clone()) {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join(GRADCHECK_FILE), &summary)?;
    }
    if !passed {
        return Err(Error::GradientMismatch { parameter: worst.clone(), error: report.max_rel_error, tolerance });
    }
    Ok(())
}

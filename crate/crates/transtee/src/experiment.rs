//! Experiment orchestration: strict TOML configs, seeded repeats,
//! metric aggregation, and artifact emission.

use std::path::Path;

use serde::Deserialize;

use crate::baselines::{Discretized, DiscretizedConfig, Mlp, MlpConfig};
use crate::datagen::{
    gen_ihdp_binary, gen_ihdp_style, gen_news_style, gen_synthetic, gen_synthetic_interval,
    gen_tcga_dosage, true_response, Dataset, TcgaDoseConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{amse, amse_dosage, ate_error, mean_std, results_csv, MetricReport};
use crate::model::{PropensityMode, TransTee, TransTeeConfig};
use crate::train::{train, History, Regularizer, Schedule, TrainConfig, TrainData};
use crate::{RngStream, Tensor};

// ---- configuration --------------------------------------------------------

fn default_n_train() -> usize {
    500
}
fn default_n_test() -> usize {
    200
}
fn default_h() -> f64 {
    1.0
}
fn default_d_model() -> usize {
    10
}
fn default_n_heads() -> usize {
    2
}
fn default_n_layers() -> usize {
    1
}
fn default_widths() -> Vec<usize> {
    vec![50, 50]
}
fn default_delta() -> usize {
    8
}
fn default_iterations() -> usize {
    1500
}
fn default_batch_size() -> usize {
    500
}
fn default_lr() -> f64 {
    0.01
}
fn default_schedule() -> String {
    "cosine".into()
}
fn default_regularizer() -> String {
    "none".into()
}
fn default_lambda() -> f64 {
    0.5
}
fn default_inner_steps() -> usize {
    1
}
fn default_log_every() -> usize {
    50
}
fn default_n_repeats() -> usize {
    10
}
fn default_seed() -> u64 {
    42
}
fn default_true() -> bool {
    true
}
fn default_grid_size() -> usize {
    65
}
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// synthetic | ihdp | ihdp_binary | news | tcga_dosage
    pub name: String,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    /// Training treatment interval (extrapolation protocols); the
    /// test interval is always [0, h].
    pub t_train_low: Option<f64>,
    pub t_train_high: Option<f64>,
    /// Covariate dimension for the surrogate generators.
    pub p: Option<usize>,
    pub n_treatments: Option<usize>,
    pub kappa: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// transtee | mlp | discretized
    pub kind: String,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_delta")]
    pub delta: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// cosine | constant
    #[serde(default = "default_schedule")]
    pub schedule: String,
    /// none | tr | ptr
    #[serde(default = "default_regularizer")]
    pub regularizer: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_n_repeats")]
    pub n_repeats: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub plots: bool,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text)?;
        let hash = fnv64_hex(text.as_bytes());
        Ok((cfg, hash))
    }

    pub fn validate(&self) -> Result<()> {
        match self.generator.name.as_str() {
            "synthetic" | "ihdp" | "ihdp_binary" | "news" | "tcga_dosage" => {}
            other => return Err(Error::config(format!("unknown generator '{other}'"))),
        }
        match self.model.kind.as_str() {
            "transtee" | "mlp" | "discretized" => {}
            other => return Err(Error::config(format!("unknown model '{other}'"))),
        }
        if self.generator.h <= 0.0 {
            return Err(Error::config("generator.h must be positive"));
        }
        let (lo, hi) = self.train_interval();
        if !(0.0..self.generator.h).contains(&lo) || hi <= lo || hi > self.generator.h {
            return Err(Error::config("invalid training treatment interval"));
        }
        if self.run.n_repeats < 1 {
            return Err(Error::config("run.n_repeats must be >= 1"));
        }
        schedule_of(&self.train.schedule)?;
        regularizer_of(&self.train.regularizer)?;
        Ok(())
    }

    pub fn train_interval(&self) -> (f64, f64) {
        (
            self.generator.t_train_low.unwrap_or(0.0),
            self.generator.t_train_high.unwrap_or(self.generator.h),
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            schedule: schedule_of(&self.train.schedule).unwrap(),
            regularizer: regularizer_of(&self.train.regularizer).unwrap(),
            lambda: self.train.lambda,
            inner_steps: self.train.inner_steps,
            log_every: self.train.log_every,
            divergence_limit: 1e6,
        }
    }
}

fn schedule_of(s: &str) -> Result<Schedule> {
    match s {
        "cosine" => Ok(Schedule::Cosine),
        "constant" => Ok(Schedule::Constant),
        other => Err(Error::config(format!("unknown schedule '{other}'"))),
    }
}

fn regularizer_of(s: &str) -> Result<Regularizer> {
    match s {
        "none" => Ok(Regularizer::None),
        "tr" => Ok(Regularizer::Tr),
        "ptr" => Ok(Regularizer::Ptr),
        other => Err(Error::config(format!("unknown regularizer '{other}'"))),
    }
}

/// FNV-1a over the raw config text: a stable run identifier.
pub fn fnv64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---- data and model assembly ----------------------------------------------

/// (train, test) pair for one repeat.
pub fn make_data(gen: &GeneratorConfig, interval: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let h = gen.h;
    match gen.name.as_str() {
        "synthetic" => {
            let restricted = interval != (0.0, h);
            if restricted {
                let train =
                    gen_synthetic_interval(gen.n_train, 0, h, interval.0, interval.1, seed)?;
                let test = gen_synthetic(0, gen.n_test, h, seed ^ 0x9e37_79b9_7f4a_7c15)?;
                Ok((train.split().0, test.split().1))
            } else {
                Ok(gen_synthetic(gen.n_train, gen.n_test, h, seed)?.split())
            }
        }
        "ihdp" => {
            let mut ds = gen_ihdp_style(gen.n_train + gen.n_test, h, seed)?;
            ds.meta.n_train = gen.n_train;
            Ok(ds.split())
        }
        "ihdp_binary" => {
            let mut ds = gen_ihdp_binary(gen.n_train + gen.n_test, h, seed)?;
            ds.meta.n_train = gen.n_train;
            Ok(ds.split())
        }
        "news" => {
            let mut ds = gen_news_style(gen.n_train + gen.n_test, gen.p.unwrap_or(50), h, seed)?;
            ds.meta.n_train = gen.n_train;
            Ok(ds.split())
        }
        "tcga_dosage" => {
            let mut rng = RngStream::new(seed ^ 0x5851_f42d_4c95_7f2d);
            let cfg = TcgaDoseConfig::sample(
                gen.n_treatments.unwrap_or(3),
                gen.p.unwrap_or(100),
                gen.kappa.unwrap_or(2.0),
                gen.alpha.unwrap_or(2.0),
                &mut rng,
            )?;
            let mut ds = gen_tcga_dosage(gen.n_train + gen.n_test, &cfg, seed)?;
            ds.meta.n_train = gen.n_train;
            Ok(ds.split())
        }
        other => Err(Error::config(format!("unknown generator '{other}'"))),
    }
}

/// A trained estimator behind one prediction interface.
pub enum Fitted {
    TransTee(Box<TransTee>),
    Mlp(Mlp),
    Discretized(Discretized),
}

impl Fitted {
    /// Batch predictions at one shared (treatment, optional dosage).
    pub fn predict_at(&mut self, x: &Tensor, t: f64, s: Option<f64>) -> Result<Vec<f64>> {
        let n = x.shape()[0];
        let tcol = Tensor::full(&[n, 1], t);
        let scol = s.map(|v| Tensor::full(&[n, 1], v));
        match self {
            Fitted::TransTee(m) => m.predict(x, &tcol, scol.as_ref()),
            Fitted::Mlp(m) => m.predict(x, &tcol, scol.as_ref()),
            Fitted::Discretized(m) => {
                if s.is_some() {
                    return Err(Error::contract(
                        "discretized baseline has no dosage input",
                    ));
                }
                m.predict(x, &tcol)
            }
        }
    }

    pub fn count_params(&self) -> usize {
        match self {
            Fitted::TransTee(m) => m.count_theta_params(),
            Fitted::Mlp(m) => m.params().scalar_count(),
            Fitted::Discretized(m) => m.count_params(),
        }
    }
}

/// Build and train the configured estimator on one dataset.
pub fn fit(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<(Fitted, History)> {
    let has_dosage = ds.s.is_some();
    let tc = cfg.train_config();
    let data = TrainData {
        x: &ds.x,
        t: &ds.t,
        s: ds.s.as_ref(),
        y: &ds.y,
    };
    let mut init_rng = RngStream::new(seed ^ 0x1234_5678_9abc_def0);
    let mut batch_rng = RngStream::new(seed ^ 0x0fed_cba9_8765_4321);
    match cfg.model.kind.as_str() {
        "transtee" => {
            let mcfg = TransTeeConfig::new(
                ds.p(),
                1,
                has_dosage,
                cfg.model.d_model,
                cfg.model.n_heads,
                cfg.model.n_layers,
            );
            let mut model = TransTee::new(mcfg, &mut init_rng)?;
            let hist = train(&mut model, &data, &tc, &mut batch_rng, None)?;
            Ok((Fitted::TransTee(Box::new(model)), hist))
        }
        "mlp" => {
            let mcfg = MlpConfig {
                p: ds.p(),
                n_treatments: 1,
                has_dosage,
                widths: cfg.model.widths.clone(),
            };
            let mut model = Mlp::new(mcfg, &mut init_rng)?;
            let hist = model.train(&data, &tc, &mut batch_rng)?;
            Ok((Fitted::Mlp(model), hist))
        }
        "discretized" => {
            if has_dosage {
                return Err(Error::config(
                    "discretized baseline does not support dosage datasets",
                ));
            }
            let (l, h) = cfg.train_interval();
            let dcfg = DiscretizedConfig {
                delta: cfg.model.delta,
                l,
                h,
                widths: cfg.model.widths.clone(),
            };
            let mut model = Discretized::new(ds.p(), dcfg, &mut init_rng)?;
            let hist = model.train(&data, &tc, &mut batch_rng)?;
            Ok((Fitted::Discretized(model), hist))
        }
        other => Err(Error::config(format!("unknown model '{other}'"))),
    }
}

/// The headline metric for one trained model on the test set.
pub fn evaluate(cfg: &ExperimentConfig, fitted: &mut Fitted, test: &Dataset) -> Result<(String, f64)> {
    match cfg.generator.name.as_str() {
        "ihdp_binary" => Ok((
            "ate_error".into(),
            ate_error(|x, t| fitted.predict_at(x, t, None), test)?,
        )),
        "tcga_dosage" => Ok((
            "amse_dosage".into(),
            amse_dosage(
                |x, t, s| fitted.predict_at(x, t as f64, Some(s)),
                test,
                cfg.run.grid_size,
            )?,
        )),
        _ => Ok((
            "amse".into(),
            amse(|x, t| fitted.predict_at(x, t, None), test, cfg.run.grid_size)?,
        )),
    }
}

// ---- orchestration --------------------------------------------------------

#[derive(Debug)]
pub struct RunSummary {
    pub reports: Vec<MetricReport>,
    pub n_repeats: usize,
    /// (repeat index, error message) for aborted repeats.
    pub failures: Vec<(usize, String)>,
}

impl RunSummary {
    /// More than 20% aborted repeats is a failed run.
    pub fn too_many_failures(&self) -> bool {
        self.failures.len() * 5 > self.n_repeats
    }
}

fn one_repeat(cfg: &ExperimentConfig, r: usize) -> Result<(f64, Fitted, Dataset)> {
    let seed = cfg.run.seed + r as u64;
    let (train_ds, test_ds) = make_data(&cfg.generator, cfg.train_interval(), seed)?;
    let (mut fitted, _) = fit(cfg, &train_ds, seed)?;
    let (_, value) = evaluate(cfg, &mut fitted, &test_ds)?;
    Ok((value, fitted, test_ds))
}

/// Run all repeats, aggregate, and write artifacts under `out_dir`:
/// `results.csv` always; `adrf.svg` and (for the attention model)
/// `attention.csv`/`attention.svg` from repeat 0 when plots are on.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    config_hash: &str,
    out_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let n = cfg.run.n_repeats;

    let outcomes: Vec<std::result::Result<(f64, Fitted, Dataset), String>> = if cfg.run.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|r| one_repeat(cfg, r).map_err(|e| e.to_string()))
                .collect()
        })
    } else {
        (0..n)
            .map(|r| one_repeat(cfg, r).map_err(|e| e.to_string()))
            .collect()
    };

    let mut values = Vec::new();
    let mut failures = Vec::new();
    let mut first_success: Option<(usize, Fitted, Dataset)> = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((v, fitted, test_ds)) => {
                values.push(v);
                if first_success.is_none() {
                    first_success = Some((r, fitted, test_ds));
                }
            }
            Err(msg) => {
                log::warn!("repeat {r} aborted: {msg}");
                failures.push((r, msg));
            }
        }
    }
    if values.is_empty() {
        return Err(Error::contract(format!(
            "all {n} repeats aborted; first error: {}",
            failures[0].1
        )));
    }

    let metric_name = match cfg.generator.name.as_str() {
        "ihdp_binary" => "ate_error",
        "tcga_dosage" => "amse_dosage",
        _ => "amse",
    };
    let (mean, std) = mean_std(&values);
    let (lo, hi) = cfg.train_interval();
    let reports = vec![MetricReport {
        metric: metric_name.into(),
        value: mean,
        std,
        n_repeats: values.len(),
        generator: cfg.generator.name.clone(),
        h_train_low: lo,
        h_train_high: hi,
        h_test_high: cfg.generator.h,
        seed: cfg.run.seed,
        config_hash: config_hash.into(),
    }];
    std::fs::write(out_dir.join("results.csv"), results_csv(&reports))?;

    if cfg.run.plots {
        if let Some((_, mut fitted, test_ds)) = first_success {
            write_plots(cfg, &mut fitted, &test_ds, out_dir)?;
        }
    }
    Ok(RunSummary {
        reports,
        n_repeats: n,
        failures,
    })
}

fn write_plots(
    cfg: &ExperimentConfig,
    fitted: &mut Fitted,
    test_ds: &Dataset,
    out_dir: &Path,
) -> Result<()> {
    if cfg.generator.name == "tcga_dosage" {
        // dose-response of treatment 0 over its dosage axis
        let grid: Vec<f64> = (0..65).map(|i| i as f64 / 64.0).collect();
        crate::plot::plot_adrf_with(
            |x, s| fitted.predict_at(x, 0.0, Some(s)),
            |row, s| true_response(test_ds, row, 0.0, Some(s)),
            test_ds,
            100,
            &grid,
            &out_dir.join("adrf.svg"),
        )?;
    } else {
        let h = cfg.generator.h;
        let grid: Vec<f64> = (0..65).map(|i| h * i as f64 / 64.0).collect();
        crate::plot::plot_adrf(
            |x, t| fitted.predict_at(x, t, None),
            test_ds,
            100,
            &grid,
            &out_dir.join("adrf.svg"),
        )?;
    }

    if let Fitted::TransTee(model) = fitted {
        let n = test_ds.len().min(64);
        let x = Tensor::new(
            vec![n, test_ds.p()],
            test_ds.x.data()[..n * test_ds.p()].to_vec(),
        )?;
        let t = Tensor::new(vec![n, 1], test_ds.t.data()[..n].to_vec())?;
        let s = test_ds
            .s
            .as_ref()
            .map(|s| Tensor::new(vec![n, 1], s.data()[..n].to_vec()))
            .transpose()?;
        let trace = model.predict_traced(&x, &t, s.as_ref(), Some(PropensityMode::Point))?;
        let groups = test_ds.meta.groups.as_ref().map(|g| g.to_vec());
        crate::plot::export_attention(&[trace], groups.as_deref(), out_dir)?;
    }
    Ok(())
}

/// Exact trainable scalar count for a model spec on a generator spec.
pub fn count_params(cfg: &ExperimentConfig) -> Result<usize> {
    let (train_ds, _) = make_data(
        &GeneratorConfig {
            n_train: 4,
            n_test: 2,
            ..cfg.generator.clone()
        },
        (0.0, cfg.generator.h),
        cfg.run.seed,
    )?;
    let has_dosage = train_ds.s.is_some();
    let mut rng = RngStream::new(0);
    match cfg.model.kind.as_str() {
        "transtee" => {
            let mcfg = TransTeeConfig::new(
                train_ds.p(),
                cfg.generator.n_treatments.unwrap_or(1),
                has_dosage,
                cfg.model.d_model,
                cfg.model.n_heads,
                cfg.model.n_layers,
            );
            Ok(TransTee::new(mcfg, &mut rng)?.count_theta_params())
        }
        "mlp" => {
            let mcfg = MlpConfig {
                p: train_ds.p(),
                n_treatments: 1,
                has_dosage,
                widths: cfg.model.widths.clone(),
            };
            Ok(Mlp::new(mcfg, &mut rng)?.count_params())
        }
        "discretized" => {
            let dcfg = DiscretizedConfig {
                delta: cfg.model.delta,
                l: 0.0,
                h: cfg.generator.h,
                widths: cfg.model.widths.clone(),
            };
            Ok(Discretized::new(train_ds.p(), dcfg, &mut rng)?.count_params())
        }
        other => Err(Error::config(format!("unknown model '{other}'"))),
    }
}

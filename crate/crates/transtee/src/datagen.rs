//! Semi-synthetic data generating processes with the treatment-interval
//! parameter `h`, the dosage/treatment selection-bias knobs for the
//! dosage benchmark, a noiseless ground-truth oracle, and CSV I/O.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::Tensor;

fn sigmoid(v: f64) -> f64 {
    // clamp so h * sigmoid stays strictly inside (0, h) in floating
    // point even when the logit blows up
    1.0 / (1.0 + (-v.clamp(-30.0, 30.0)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Synthetic,
    Ihdp,
    IhdpBinary,
    News,
    TcgaDosage,
    External,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Synthetic => "synthetic",
            GeneratorKind::Ihdp => "ihdp",
            GeneratorKind::IhdpBinary => "ihdp_binary",
            GeneratorKind::News => "news",
            GeneratorKind::TcgaDosage => "tcga_dosage",
            GeneratorKind::External => "external",
        }
    }
}

/// Noiseless structural response handle.
#[derive(Debug, Clone)]
pub enum Oracle {
    Synthetic,
    Ihdp { c1: f64, c2: f64, h: f64 },
    IhdpBinary { c1: f64, h: f64 },
    News { v1: Vec<f64>, v2: Vec<f64>, v3: Vec<f64> },
    Tcga { c: f64, vs: Vec<[Vec<f64>; 3]> },
    /// Loaded from a file; only factual evaluation is possible.
    None,
}

#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub generator: GeneratorKind,
    pub h: f64,
    pub seed: u64,
    pub n_train: usize,
    /// (S_con, S_dis1, S_dis2), zero-based, when applicable.
    pub groups: Option<[Vec<usize>; 3]>,
    pub noise_var: f64,
    /// The printed synthetic outcome formula consumes raw t; flagged
    /// when h != 1 so downstream reporting can note it.
    pub raw_t_outcome: bool,
    /// Training treatment interval (differs from [0, h] under
    /// extrapolation protocols).
    pub t_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, p]`.
    pub x: Tensor,
    /// `[n, 1]`: continuous treatment, or treatment index for the
    /// dosage benchmark.
    pub t: Tensor,
    /// `[n, 1]` dosage, when the generator has one.
    pub s: Option<Tensor>,
    /// `[n]`.
    pub y: Tensor,
    /// Treatment assignment probabilities `[n, k]` where the selection
    /// mechanism is known (dosage benchmark).
    pub propensity: Option<Tensor>,
    pub oracle: Oracle,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p(&self) -> usize {
        self.x.last_dim()
    }

    fn take_rows(&self, range: std::ops::Range<usize>) -> Dataset {
        let gather = |t: &Tensor| {
            let c = t.last_dim();
            Tensor::new(
                vec![range.len(), c],
                t.data()[range.start * c..range.end * c].to_vec(),
            )
            .unwrap()
        };
        Dataset {
            x: gather(&self.x),
            t: gather(&self.t),
            s: self.s.as_ref().map(gather),
            y: Tensor::vector(self.y.data()[range.clone()].to_vec()),
            propensity: self.propensity.as_ref().map(gather),
            oracle: self.oracle.clone(),
            meta: DatasetMeta {
                n_train: range.len(),
                ..self.meta.clone()
            },
        }
    }

    /// Split into (train, test) at `meta.n_train`.
    pub fn split(&self) -> (Dataset, Dataset) {
        let k = self.meta.n_train.min(self.len());
        (self.take_rows(0..k), self.take_rows(k..self.len()))
    }
}

/// Noiseless structural response. For the dosage benchmark `t` is the
/// treatment index and `s` the dosage; elsewhere `s` is ignored.
pub fn true_response(ds: &Dataset, x: &[f64], t: f64, s: Option<f64>) -> Result<f64> {
    match &ds.oracle {
        Oracle::Synthetic => Ok(synthetic_outcome(x, t)),
        Oracle::Ihdp { c1, h, .. } => Ok(ihdp_outcome(x, t / h, *c1)),
        Oracle::IhdpBinary { c1, .. } => {
            if t != 0.0 && t != 1.0 {
                return Err(Error::contract("binary variant: t must be 0 or 1"));
            }
            Ok(ihdp_outcome(x, t, *c1))
        }
        Oracle::News { v1, v2, v3 } => Ok(news_outcome(x, t, v1, v2, v3)),
        Oracle::Tcga { c, vs } => {
            let k = t.round() as usize;
            if k >= vs.len() {
                return Err(Error::contract(format!("treatment index {k} out of range")));
            }
            let s = s.ok_or_else(|| Error::contract("dosage benchmark oracle needs s"))?;
            Ok(tcga_response(*c, &vs[k], x, s, k))
        }
        Oracle::None => Err(Error::contract(
            "dataset has no oracle (loaded from file)",
        )),
    }
}

// ---- synthetic ------------------------------------------------------------

fn synthetic_tilde(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    (10.0 * x1.max(x2).max(x3).sin() + x3.max(x4).max(x5).powi(3)) / (1.0 + (x1 + x5).powi(2))
        + (0.5 * x3).sin() * (1.0 + (x4 - 0.5 * x3).exp())
        + x3 * x3
        + 2.0 * x4.sin()
        + 2.0 * x5
        - 6.5
}

fn synthetic_outcome(x: &[f64], t: f64) -> f64 {
    let (x1, x3, x6) = (x[0], x[2], x[5]);
    (2.0 * std::f64::consts::PI * (t - 0.5)).cos()
        * (t * t + 4.0 * x1.max(x6).powi(3) / (1.0 + 2.0 * x3 * x3))
}

fn gen_synthetic_impl(
    n_train: usize,
    n_test: usize,
    h: f64,
    t_range: (f64, f64),
    seed: u64,
    noise_scale: f64,
) -> Result<Dataset> {
    if h <= 0.0 {
        return Err(Error::contract("h must be positive"));
    }
    let n = n_train + n_test;
    let root = RngStream::new(seed);
    let mut rx = root.split(1);
    let mut rt = root.split(2);
    let mut ry = root.split(3);
    let noise_sd = noise_scale * 0.25f64.sqrt();

    let mut xs = Vec::with_capacity(n * 6);
    let mut ts = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while ts.len() < n {
        attempts += 1;
        if attempts > 10_000 * n.max(1) {
            return Err(Error::numeric(
                "rejection sampling failed: treatment interval too narrow",
            ));
        }
        let x: Vec<f64> = (0..6).map(|_| rx.uniform()).collect();
        let t = sigmoid(synthetic_tilde(&x) + noise_sd * rt.standard_normal()) * h;
        if t < t_range.0 || t > t_range.1 {
            continue;
        }
        let y = synthetic_outcome(&x, t) + noise_sd * ry.standard_normal();
        xs.extend_from_slice(&x);
        ts.push(t);
        ys.push(y);
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, 6], xs)?,
        t: Tensor::new(vec![n, 1], ts)?,
        s: None,
        y: Tensor::vector(ys),
        propensity: None,
        oracle: Oracle::Synthetic,
        meta: DatasetMeta {
            generator: GeneratorKind::Synthetic,
            h,
            seed,
            n_train,
            groups: None,
            noise_var: (noise_sd * noise_sd),
            raw_t_outcome: h != 1.0,
            t_range,
        },
    })
}

/// Synthetic benchmark: 6 uniform covariates, sigmoid-squashed
/// treatment in (0, h), nonlinear outcome with N(0, 0.25) noise.
/// Rows `[0, n_train)` are the training portion.
pub fn gen_synthetic(n_train: usize, n_test: usize, h: f64, seed: u64) -> Result<Dataset> {
    gen_synthetic_impl(n_train, n_test, h, (0.0, h), seed, 1.0)
}

/// Synthetic benchmark restricted by rejection to `t in [t_low, t_high]`
/// (extrapolation protocols train on a sub-interval).
pub fn gen_synthetic_interval(
    n_train: usize,
    n_test: usize,
    h: f64,
    t_low: f64,
    t_high: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=h).contains(&t_low) || t_high <= t_low || t_high > h {
        return Err(Error::contract("need 0 <= t_low < t_high <= h"));
    }
    gen_synthetic_impl(n_train, n_test, h, (t_low, t_high), seed, 1.0)
}

// ---- IHDP-style -----------------------------------------------------------

const IHDP_P: usize = 25;

fn ihdp_groups() -> [Vec<usize>; 3] {
    // 1-based {1,2,3,5,6}, {4,7..15}, {16..25}
    [
        vec![0, 1, 2, 4, 5],
        vec![3, 6, 7, 8, 9, 10, 11, 12, 13, 14],
        (15..25).collect(),
    ]
}

fn group_mean(x: &Tensor, group: &[usize]) -> f64 {
    let n = x.shape()[0];
    let mut acc = 0.0;
    for i in 0..n {
        let row = x.row(i);
        acc += group.iter().map(|&j| row[j]).sum::<f64>() / group.len() as f64;
    }
    acc / n as f64
}

fn ihdp_outcome(x: &[f64], t_over_h: f64, c1: f64) -> f64 {
    let g = ihdp_groups();
    let s1: f64 = g[1].iter().map(|&j| x[j] - c1).sum::<f64>() / g[1].len() as f64;
    let (x1, x2, x3, x5, x6) = (x[0], x[1], x[2], x[4], x[5]);
    (3.0 * std::f64::consts::PI * t_over_h).sin() / (1.2 - t_over_h)
        * ((5.0 * s1).tanh() + (0.2 * (x1 - x6)).exp() / (0.5 + 5.0 * x2.min(x3).min(x5)))
}

fn gen_ihdp_impl(n: usize, h: f64, seed: u64, noise_scale: f64, binary: bool) -> Result<Dataset> {
    if h <= 0.0 {
        return Err(Error::contract("h must be positive"));
    }
    let root = RngStream::new(seed);
    let mut rx = root.split(1);
    let mut rt = root.split(2);
    let mut ry = root.split(3);
    let noise_sd = noise_scale * 0.25f64.sqrt();
    let groups = ihdp_groups();

    // continuous columns standard normal; binary columns Bernoulli(0.5)
    // standardized to mean 0 / sd 1 per column
    let mut xdata = vec![0.0f64; n * IHDP_P];
    for j in 0..IHDP_P {
        let continuous = groups[0].contains(&j);
        if continuous {
            for i in 0..n {
                xdata[i * IHDP_P + j] = rx.standard_normal();
            }
        } else {
            let col: Vec<f64> = (0..n).map(|_| if rx.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt().max(1e-12);
            for i in 0..n {
                xdata[i * IHDP_P + j] = (col[i] - mean) / sd;
            }
        }
    }
    let x = Tensor::new(vec![n, IHDP_P], xdata)?;
    let c1 = group_mean(&x, &groups[1]);
    let c2 = group_mean(&x, &groups[2]);

    let mut ts = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let (x1, x2, x3, x5, x6) = (row[0], row[1], row[2], row[4], row[5]);
        let s2: f64 =
            groups[2].iter().map(|&j| row[j] - c2).sum::<f64>() / groups[2].len() as f64;
        let tilde = 2.0 * x1 / (1.0 + x2)
            + 2.0 * x3.max(x5).max(x6) / (0.2 + x3.min(x5).min(x6))
            + 2.0 * (5.0 * s2 - 4.0 + noise_sd * rt.standard_normal()).tanh();
        let t_cont = sigmoid(tilde) * h;
        let t = if binary {
            if t_cont > h / 2.0 {
                1.0
            } else {
                0.0
            }
        } else {
            t_cont
        };
        let t_over_h = if binary { t } else { t_cont / h };
        ys.push(ihdp_outcome(row, t_over_h, c1) + noise_sd * ry.standard_normal());
        ts.push(t);
    }
    Ok(Dataset {
        x,
        t: Tensor::new(vec![n, 1], ts)?,
        s: None,
        y: Tensor::vector(ys),
        propensity: None,
        oracle: if binary {
            Oracle::IhdpBinary { c1, h }
        } else {
            Oracle::Ihdp { c1, c2, h }
        },
        meta: DatasetMeta {
            generator: if binary {
                GeneratorKind::IhdpBinary
            } else {
                GeneratorKind::Ihdp
            },
            h,
            seed,
            n_train: n,
            groups: Some(groups),
            noise_var: noise_sd * noise_sd,
            raw_t_outcome: false,
            t_range: (0.0, h),
        },
    })
}

/// IHDP-style benchmark: 25 covariates (5 continuous, 20 binary
/// standardized), continuous treatment in (0, h).
pub fn gen_ihdp_style(n: usize, h: f64, seed: u64) -> Result<Dataset> {
    gen_ihdp_impl(n, h, seed, 1.0, false)
}

/// Binary-treatment variant (threshold at h/2) for the ATE experiment.
pub fn gen_ihdp_binary(n: usize, h: f64, seed: u64) -> Result<Dataset> {
    gen_ihdp_impl(n, h, seed, 1.0, true)
}

// ---- News-style -----------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_normal_vec(p: usize, rng: &mut RngStream) -> Vec<f64> {
    let v: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
    let norm = dot(&v, &v).sqrt().max(1e-300);
    v.into_iter().map(|x| x / norm).collect()
}

fn news_outcome(x: &[f64], t: f64, v1: &[f64], v2: &[f64], v3: &[f64]) -> f64 {
    let d3 = guarded(dot(v3, x));
    let yp = (dot(v2, x) / d3 - 0.3).exp();
    2.0 * (yp.clamp(-2.0, 2.0) + 20.0 * dot(v1, x))
        * (4.0 * (t - 0.5).powi(2) + (std::f64::consts::FRAC_PI_2 * t).sin())
}

/// Sign-preserving guard against a vanishing denominator.
fn guarded(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        1e-12f64.copysign(if v == 0.0 { 1.0 } else { v })
    } else {
        v
    }
}

/// News-style benchmark with sparse nonnegative covariate surrogates
/// of dimension `p` and Beta-distributed treatments in [0, h].
pub fn gen_news_style(n: usize, p: usize, h: f64, seed: u64) -> Result<Dataset> {
    if h <= 0.0 {
        return Err(Error::contract("h must be positive"));
    }
    let root = RngStream::new(seed);
    let mut rv = root.split(1);
    let mut rx = root.split(2);
    let mut rt = root.split(3);
    let mut ry = root.split(4);
    let noise_sd = 0.5f64.sqrt();

    let v1 = unit_normal_vec(p, &mut rv);
    let v2 = unit_normal_vec(p, &mut rv);
    let v3 = unit_normal_vec(p, &mut rv);

    let mut xs = Vec::with_capacity(n * p);
    let mut ts = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        // sparse exponential-magnitude nonnegative entries
        let x: Vec<f64> = (0..p)
            .map(|_| if rx.bernoulli(0.5) { rx.exponential() } else { 0.0 })
            .collect();
        let shape2 = (dot(&v3, &x) / (2.0 * guarded(dot(&v2, &x)))).abs().max(1e-2);
        let t = rt.beta(2.0, shape2) * h;
        let y = news_outcome(&x, t, &v1, &v2, &v3) + noise_sd * ry.standard_normal();
        xs.extend_from_slice(&x);
        ts.push(t);
        ys.push(y);
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, p], xs)?,
        t: Tensor::new(vec![n, 1], ts)?,
        s: None,
        y: Tensor::vector(ys),
        propensity: None,
        oracle: Oracle::News { v1, v2, v3 },
        meta: DatasetMeta {
            generator: GeneratorKind::News,
            h,
            seed,
            n_train: n,
            groups: None,
            noise_var: 0.5,
            raw_t_outcome: true,
            t_range: (0.0, h),
        },
    })
}

// ---- TCGA-style dosage benchmark ------------------------------------------

#[derive(Debug, Clone)]
pub struct TcgaDoseConfig {
    pub n_treatments: usize,
    /// Treatment selection bias; 0 gives uniform assignment.
    pub kappa: f64,
    /// Dosage selection bias; 1 gives the uniform distribution.
    pub alpha: f64,
    pub c: f64,
    /// Per-treatment unit-norm parameter vectors (v1, v2, v3).
    pub vs: Vec<[Vec<f64>; 3]>,
}

impl TcgaDoseConfig {
    /// Sample the per-treatment parameter vectors for one run.
    pub fn sample(n_treatments: usize, p: usize, kappa: f64, alpha: f64, rng: &mut RngStream) -> Result<Self> {
        if !(1..=3).contains(&n_treatments) {
            return Err(Error::contract("n_treatments must be in 1..=3"));
        }
        let vs = (0..n_treatments)
            .map(|_| {
                [
                    unit_normal_vec(p, rng),
                    unit_normal_vec(p, rng),
                    unit_normal_vec(p, rng),
                ]
            })
            .collect();
        let cfg = TcgaDoseConfig {
            n_treatments,
            kappa,
            alpha,
            c: 10.0,
            vs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1.0 {
            return Err(Error::contract("alpha must be >= 1"));
        }
        if self.vs.len() != self.n_treatments {
            return Err(Error::contract("one parameter triple per treatment"));
        }
        for triple in &self.vs {
            for v in triple {
                let norm = dot(v, v).sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::contract(format!(
                        "parameter vector norm {norm} not 1 within 1e-12"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dose-response surface for treatment index `k` (0-based).
/// Treatment 1's printed surface has no v2 term and therefore cannot
/// produce its own stated optimum; the established benchmark form
/// C(v1'x + 12 v2'x s - 12 v3'x s^2) is used instead.
fn tcga_response(c: f64, vs: &[Vec<f64>; 3], x: &[f64], s: f64, k: usize) -> f64 {
    let d1 = dot(&vs[0], x);
    let d2 = dot(&vs[1], x);
    let d3 = dot(&vs[2], x);
    match k {
        0 => c * (d1 + 12.0 * d2 * s - 12.0 * d3 * s * s),
        1 => c * (d1 + (std::f64::consts::PI * (d2 / guarded(d3)) * s).sin()),
        2 => {
            let b = 0.75 * d2 / guarded(d3);
            c * (d1 + 12.0 * s * (s - b).powi(2))
        }
        _ => unreachable!("treatment index out of range"),
    }
}

/// Optimal dosage per Table-8 for treatment index `k` (0-based).
fn tcga_optimal(vs: &[Vec<f64>; 3], x: &[f64], k: usize) -> f64 {
    let d2 = dot(&vs[1], x);
    let d3 = dot(&vs[2], x);
    match k {
        0 => d2 / (2.0 * guarded(d3)),
        1 => d3 / (2.0 * guarded(d2)),
        2 => {
            let b = 0.75 * d2 / guarded(d3);
            if b >= 0.75 {
                b / 3.0
            } else {
                1.0
            }
        }
        _ => unreachable!("treatment index out of range"),
    }
}

fn beta_for_optimum(alpha: f64, s_star: f64) -> f64 {
    (alpha - 1.0) / s_star + 2.0 - alpha
}

/// Dosage benchmark: unit-norm nonnegative covariates, per-treatment
/// dose-response surfaces, Beta-sampled dosages biased toward the
/// optimal dose, softmax-sampled factual treatment.
pub fn gen_tcga_dosage(n: usize, config: &TcgaDoseConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let p = config.vs[0][0].len();
    let root = RngStream::new(seed);
    let mut rx = root.split(1);
    let mut rd = root.split(2);
    let mut rt = root.split(3);
    let mut ry = root.split(4);
    let noise_sd = 0.2f64.sqrt();
    let k = config.n_treatments;

    let mut xs = Vec::with_capacity(n * p);
    let mut ts = Vec::with_capacity(n);
    let mut ss = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut props = Vec::with_capacity(n * k);
    for _ in 0..n {
        let mut x: Vec<f64> = (0..p).map(|_| rx.standard_normal().abs()).collect();
        let norm = dot(&x, &x).sqrt().max(1e-300);
        for v in x.iter_mut() {
            *v /= norm;
        }

        // a dosage per candidate treatment
        let mut doses = Vec::with_capacity(k);
        for kk in 0..k {
            let s_star = tcga_optimal(&config.vs[kk], &x, kk);
            let dose = if s_star == 0.0 {
                // symmetric fallback: mirrored draw parameterized as
                // though the optimum were 1
                1.0 - rd.beta(config.alpha, beta_for_optimum(config.alpha, 1.0))
            } else {
                let s_star = s_star.clamp(1e-3, 1.0);
                rd.beta(config.alpha, beta_for_optimum(config.alpha, s_star))
            };
            doses.push(dose);
        }

        // factual treatment via softmax over response values
        let logits: Vec<f64> = (0..k)
            .map(|kk| config.kappa * tcga_response(config.c, &config.vs[kk], &x, doses[kk], kk))
            .collect();
        let maxl = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - maxl).exp()).collect();
        let total: f64 = weights.iter().sum();
        let t_f = rt.categorical(&weights);

        let y = tcga_response(config.c, &config.vs[t_f], &x, doses[t_f], t_f)
            + noise_sd * ry.standard_normal();
        props.extend(weights.iter().map(|w| w / total));
        xs.extend_from_slice(&x);
        ts.push(t_f as f64);
        ss.push(doses[t_f]);
        ys.push(y);
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, p], xs)?,
        t: Tensor::new(vec![n, 1], ts)?,
        s: Some(Tensor::new(vec![n, 1], ss)?),
        y: Tensor::vector(ys),
        propensity: Some(Tensor::new(vec![n, k], props)?),
        oracle: Oracle::Tcga {
            c: config.c,
            vs: config.vs.clone(),
        },
        meta: DatasetMeta {
            generator: GeneratorKind::TcgaDosage,
            h: 1.0,
            seed,
            n_train: n,
            groups: None,
            noise_var: 0.2,
            raw_t_outcome: false,
            t_range: (0.0, 1.0),
        },
    })
}

// ---- CSV I/O --------------------------------------------------------------

/// Schema: header `x1,..,xp,t[,s],y`; one float per cell.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let p = ds.p();
    let mut header: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    if ds.s.is_some() {
        header.push("s".into());
    }
    header.push("y".into());
    writeln!(f, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut cells: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        cells.push(format!("{}", ds.t.row(i)[0]));
        if let Some(s) = &ds.s {
            cells.push(format!("{}", s.row(i)[0]));
        }
        cells.push(format!("{}", ds.y.data()[i]));
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Strict reader for the schema above; the result carries no oracle.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();

    let mut p = 0usize;
    let mut rest = &cols[..];
    while let Some((first, tail)) = rest.split_first() {
        if *first == format!("x{}", p + 1) {
            p += 1;
            rest = tail;
        } else {
            break;
        }
    }
    if p == 0 {
        return Err(Error::Schema("expected covariate columns x1..xp".into()));
    }
    let has_s = match rest {
        ["t", "s", "y"] => true,
        ["t", "y"] => false,
        _ => {
            return Err(Error::Schema(format!(
                "unexpected columns after covariates: {:?} (schema is x1..xp,t[,s],y)",
                rest
            )))
        }
    };
    let ncols = p + 2 + has_s as usize;

    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut ss = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != ncols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {ncols} cells, got {}", cells.len()),
            });
        }
        let parse = |cell: &str| -> Result<f64> {
            cell.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad float '{cell}'"),
            })
        };
        for cell in &cells[..p] {
            xs.push(parse(cell)?);
        }
        ts.push(parse(cells[p])?);
        if has_s {
            ss.push(parse(cells[p + 1])?);
        }
        ys.push(parse(cells[ncols - 1])?);
    }
    if ys.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    let n = ys.len();
    let h = ts.iter().cloned().fold(0.0f64, f64::max);
    Ok(Dataset {
        x: Tensor::new(vec![n, p], xs)?,
        t: Tensor::new(vec![n, 1], ts)?,
        s: if has_s {
            Some(Tensor::new(vec![n, 1], ss)?)
        } else {
            None
        },
        y: Tensor::vector(ys),
        propensity: None,
        oracle: Oracle::None,
        meta: DatasetMeta {
            generator: GeneratorKind::External,
            h,
            seed: 0,
            n_train: n,
            groups: None,
            noise_var: f64::NAN,
            raw_t_outcome: false,
            t_range: (0.0, h),
        },
    })
}

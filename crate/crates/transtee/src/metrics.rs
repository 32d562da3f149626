//! Evaluation metrics for continuous, binary, dosage, and
//! multi-treatment settings, plus the results-row record.

use crate::datagen::{true_response, Dataset, GeneratorKind};
use crate::error::{Error, Result};
use crate::Tensor;

/// Trapezoid weights for a uniform density on a `g`-point grid: they
/// sum to exactly 1, so a constant integrand is integrated exactly.
fn trapezoid_weights(g: usize) -> Vec<f64> {
    let mut w = vec![1.0 / (g - 1) as f64; g];
    w[0] *= 0.5;
    w[g - 1] *= 0.5;
    w
}

fn grid_points(lo: f64, hi: f64, g: usize) -> Vec<f64> {
    (0..g)
        .map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64)
        .collect()
}

/// AMSE over the dataset's treatment interval:
/// (1/N) sum_i integral [mu_hat(x_i,t) - mu(x_i,t)]^2 pi(t) dt,
/// pi uniform, trapezoid quadrature. `predict` returns predictions for
/// all rows of `x` at one shared treatment value.
pub fn amse<F>(mut predict: F, ds: &Dataset, grid_size: usize) -> Result<f64>
where
    F: FnMut(&Tensor, f64) -> Result<Vec<f64>>,
{
    if grid_size < 2 {
        return Err(Error::contract("grid_size must be >= 2"));
    }
    let (lo, hi) = ds.meta.t_range;
    let weights = trapezoid_weights(grid_size);
    let n = ds.len();
    let mut acc = 0.0;
    for (w, t) in weights.iter().zip(grid_points(lo, hi, grid_size)) {
        let yhat = predict(&ds.x, t)?;
        if yhat.len() != n {
            return Err(Error::dim(format!(
                "predictor returned {} values for {} rows",
                yhat.len(),
                n
            )));
        }
        for i in 0..n {
            let mu = true_response(ds, ds.x.row(i), t, None)?;
            acc += w * (yhat[i] - mu).powi(2);
        }
    }
    Ok(acc / n as f64)
}

/// |estimated ATE - true ATE| for a binary-treatment dataset.
pub fn ate_error<F>(mut predict: F, ds: &Dataset) -> Result<f64>
where
    F: FnMut(&Tensor, f64) -> Result<Vec<f64>>,
{
    if ds.meta.generator != GeneratorKind::IhdpBinary
        && !ds.t.data().iter().all(|&t| t == 0.0 || t == 1.0)
    {
        return Err(Error::contract("ate_error needs a binary-treatment dataset"));
    }
    let n = ds.len();
    let y1 = predict(&ds.x, 1.0)?;
    let y0 = predict(&ds.x, 0.0)?;
    let mut est = 0.0;
    let mut truth = 0.0;
    for i in 0..n {
        est += y1[i] - y0[i];
        truth += true_response(ds, ds.x.row(i), 1.0, None)?
            - true_response(ds, ds.x.row(i), 0.0, None)?;
    }
    Ok(((est - truth) / n as f64).abs())
}

/// PEHE over the top-K treatments per unit, ranked by descending
/// propensity: the squared pairwise effect-estimation errors averaged
/// over the C(K,2) pairs and over units. The weighted variant
/// multiplies each pair term by p(t|x) * p(t'|x).
///
/// `pred` and `truth` are per-unit per-treatment values `[N, T]`;
/// `propensities` has the same shape.
pub fn pehe_at_k(
    pred: &Tensor,
    truth: &Tensor,
    propensities: &Tensor,
    k: usize,
    weighted: bool,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract("pehe_at_k needs K >= 2"));
    }
    if pred.shape() != truth.shape() || pred.shape() != propensities.shape() {
        return Err(Error::dim("pred/truth/propensity shapes differ"));
    }
    let (n, t) = (pred.shape()[0], pred.shape()[1]);
    if k > t {
        return Err(Error::contract(format!("K = {k} exceeds {t} treatments")));
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let pi = propensities.row(i);
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| pi[b].partial_cmp(&pi[a]).unwrap());
        let top = &order[..k];
        let (pr, tr) = (pred.row(i), truth.row(i));
        for (a_pos, &a) in top.iter().enumerate() {
            for &b in &top[a_pos + 1..] {
                let err = ((pr[a] - pr[b]) - (tr[a] - tr[b])).powi(2);
                acc += if weighted { pi[a] * pi[b] * err } else { err };
            }
        }
    }
    Ok(acc / (n as f64 * pairs))
}

/// AMSE over dosages, averaged over all units and treatments:
/// (1/NT) sum_i sum_t integral [mu_hat - mu]^2 pi(s) ds, pi uniform on
/// [0, 1]. `predict(x, treatment, dose)` returns all-row predictions.
pub fn amse_dosage<F>(mut predict: F, ds: &Dataset, grid_size: usize) -> Result<f64>
where
    F: FnMut(&Tensor, usize, f64) -> Result<Vec<f64>>,
{
    if grid_size < 2 {
        return Err(Error::contract("grid_size must be >= 2"));
    }
    if ds.s.is_none() {
        return Err(Error::contract("amse_dosage needs a dosage dataset"));
    }
    let n_treat = match &ds.oracle {
        crate::datagen::Oracle::Tcga { vs, .. } => vs.len(),
        _ => return Err(Error::contract("amse_dosage needs the dosage oracle")),
    };
    let weights = trapezoid_weights(grid_size);
    let n = ds.len();
    let mut acc = 0.0;
    for t in 0..n_treat {
        for (w, s) in weights.iter().zip(grid_points(0.0, 1.0, grid_size)) {
            let yhat = predict(&ds.x, t, s)?;
            for i in 0..n {
                let mu = true_response(ds, ds.x.row(i), t as f64, Some(s))?;
                acc += w * (yhat[i] - mu).powi(2);
            }
        }
    }
    Ok(acc / (n * n_treat) as f64)
}

/// Dosage-averaged per-treatment value matrices (trapezoid over
/// [0, 1]) for PEHE on dosage datasets: returns (pred, truth), each
/// `[N, T]`.
pub fn treatment_value_matrices<F>(
    mut predict: F,
    ds: &Dataset,
    grid_size: usize,
) -> Result<(Tensor, Tensor)>
where
    F: FnMut(&Tensor, usize, f64) -> Result<Vec<f64>>,
{
    let n_treat = match &ds.oracle {
        crate::datagen::Oracle::Tcga { vs, .. } => vs.len(),
        _ => return Err(Error::contract("needs the dosage oracle")),
    };
    let weights = trapezoid_weights(grid_size.max(2));
    let n = ds.len();
    let mut pred = Tensor::zeros(&[n, n_treat]);
    let mut truth = Tensor::zeros(&[n, n_treat]);
    for t in 0..n_treat {
        for (w, s) in weights.iter().zip(grid_points(0.0, 1.0, grid_size.max(2))) {
            let yhat = predict(&ds.x, t, s)?;
            for i in 0..n {
                pred.data_mut()[i * n_treat + t] += w * yhat[i];
                truth.data_mut()[i * n_treat + t] +=
                    w * true_response(ds, ds.x.row(i), t as f64, Some(s))?;
            }
        }
    }
    Ok((pred, truth))
}

// ---- reporting ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    pub n_repeats: usize,
    pub generator: String,
    pub h_train_low: f64,
    pub h_train_high: f64,
    pub h_test_high: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub const RESULTS_HEADER: &str =
    "metric,value,std,n_repeats,generator,h_train_low,h_train_high,h_test_high,seed,config_hash";

pub fn results_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in reports {
        let std = r.std.map_or(String::new(), |s| format!("{s}"));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.metric,
            r.value,
            std,
            r.n_repeats,
            r.generator,
            r.h_train_low,
            r.h_train_high,
            r.h_test_high,
            r.seed,
            r.config_hash
        ));
    }
    out
}

/// Mean and (population) standard deviation across repeats.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, Some(var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_ihdp_binary, gen_synthetic, gen_tcga_dosage, TcgaDoseConfig};
    use crate::RngStream;

    fn oracle_predictor(ds: &Dataset) -> impl FnMut(&Tensor, f64) -> Result<Vec<f64>> + '_ {
        move |x: &Tensor, t: f64| {
            (0..x.shape()[0])
                .map(|i| true_response(ds, x.row(i), t, None))
                .collect()
        }
    }

    #[test]
    fn amse_zero_for_oracle_and_offset_squared() {
        let ds = gen_synthetic(60, 0, 1.0, 1).unwrap();
        let v = amse(oracle_predictor(&ds), &ds, 65).unwrap();
        assert_eq!(v, 0.0);

        for grid in [2, 5, 65] {
            let c = 0.3;
            let v = amse(
                |x, t| {
                    (0..x.shape()[0])
                        .map(|i| true_response(&ds, x.row(i), t, None).map(|m| m + c))
                        .collect()
                },
                &ds,
                grid,
            )
            .unwrap();
            assert!((v - c * c).abs() < 1e-12, "grid {grid}: {v}");
        }
    }

    #[test]
    fn amse_converges_under_grid_refinement() {
        let ds = gen_synthetic(40, 0, 1.0, 2).unwrap();
        // a smooth, imperfect model
        fn model<'a>(ds: &'a Dataset) -> impl FnMut(&Tensor, f64) -> Result<Vec<f64>> + 'a {
            move |x: &Tensor, t: f64| {
                (0..x.shape()[0])
                    .map(|i| {
                        true_response(ds, x.row(i), t, None)
                            .map(|m| m + 0.1 * (3.0 * t).sin() + 0.05 * x.row(i)[0])
                    })
                    .collect()
            }
        }
        let a = amse(model(&ds), &ds, 65).unwrap();
        let b = amse(model(&ds), &ds, 257).unwrap();
        assert!((a - b).abs() / b.abs() < 1e-3, "a {a} b {b}");
    }

    #[test]
    fn ate_error_basics() {
        let ds = gen_ihdp_binary(80, 1.0, 3).unwrap();
        assert_eq!(ate_error(oracle_predictor(&ds), &ds).unwrap(), 0.0);
        // arm-constant shift cancels
        let v = ate_error(
            |x, t| {
                (0..x.shape()[0])
                    .map(|i| true_response(&ds, x.row(i), t, None).map(|m| m + 7.5))
                    .collect()
            },
            &ds,
        )
        .unwrap();
        assert!(v.abs() < 1e-12);
        // non-binary dataset rejected
        let cont = gen_synthetic(10, 0, 1.0, 4).unwrap();
        assert!(ate_error(oracle_predictor(&cont), &cont).is_err());
    }

    #[test]
    fn ate_error_hand_toy() {
        // 3 units; oracle effects 1, 2, 3 (true ATE 2); model says
        // 2, 2, 5 (est ATE 3) -> error 1
        let mut ds = gen_ihdp_binary(3, 1.0, 5).unwrap();
        // overwrite oracle by measuring it, then bias the predictions
        let base: Vec<(f64, f64)> = (0..3)
            .map(|i| {
                (
                    true_response(&ds, ds.x.row(i), 0.0, None).unwrap(),
                    true_response(&ds, ds.x.row(i), 1.0, None).unwrap(),
                )
            })
            .collect();
        ds.t = Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let bias = [1.0, 0.0, 2.0];
        let v = ate_error(
            |x, t| {
                Ok((0..x.shape()[0])
                    .map(|i| {
                        let (y0, y1) = base[i];
                        if t == 1.0 {
                            y1 + bias[i]
                        } else {
                            y0
                        }
                    })
                    .collect())
            },
            &ds,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn pehe_zero_for_exact_and_k2_reduction() {
        let truth = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 1.0, -1.0]).unwrap();
        let props = Tensor::new(vec![2, 3], vec![0.5, 0.3, 0.2, 0.2, 0.5, 0.3]).unwrap();
        assert_eq!(pehe_at_k(&truth, &truth, &props, 3, false).unwrap(), 0.0);

        // K=2: single pair between the two most propense treatments
        let pred = Tensor::new(vec![2, 3], vec![1.5, 2.0, 3.0, 0.0, 1.0, -1.0]).unwrap();
        let v = pehe_at_k(&pred, &truth, &props, 2, false).unwrap();
        // unit 0 top-2 = {0, 1}: err ((1.5-2)-(1-2))^2 = 0.25; unit 1
        // top-2 = {1, 2}: exact
        assert!((v - 0.125).abs() < 1e-12, "{v}");
    }

    #[test]
    fn weighted_pehe_not_larger_on_toy() {
        let mut rng = RngStream::new(9);
        let n = 20;
        let truth = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| rng.uniform_in(-2.0, 2.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let pred = Tensor::new(
            vec![n, 3],
            truth.data().iter().map(|v| v + rng.uniform_in(-0.5, 0.5)).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut pdata = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let raw: Vec<f64> = (0..3).map(|_| rng.uniform_in(0.1, 1.0)).collect();
            let tot: f64 = raw.iter().sum();
            pdata.extend(raw.iter().map(|v| v / tot));
        }
        let props = Tensor::new(vec![n, 3], pdata).unwrap();
        let w = pehe_at_k(&pred, &truth, &props, 3, true).unwrap();
        let u = pehe_at_k(&pred, &truth, &props, 3, false).unwrap();
        assert!(w <= u, "w {w} u {u}");
    }

    #[test]
    fn pehe_is_unit_order_invariant() {
        let truth = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 1.0, -1.0]).unwrap();
        let pred = Tensor::new(vec![2, 3], vec![1.5, 1.8, 3.1, 0.2, 0.9, -1.2]).unwrap();
        let props = Tensor::new(vec![2, 3], vec![0.5, 0.3, 0.2, 0.2, 0.5, 0.3]).unwrap();
        let swap = |t: &Tensor| {
            let mut d = t.row(1).to_vec();
            d.extend_from_slice(t.row(0));
            Tensor::new(vec![2, 3], d).unwrap()
        };
        let a = pehe_at_k(&pred, &truth, &props, 3, true).unwrap();
        let b = pehe_at_k(&swap(&pred), &swap(&truth), &swap(&props), 3, true).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn amse_dosage_zero_offset_and_consistency() {
        let mut rng = RngStream::new(15);
        let cfg = TcgaDoseConfig::sample(2, 10, 2.0, 2.0, &mut rng).unwrap();
        let ds = gen_tcga_dosage(30, &cfg, 17).unwrap();
        fn oracle<'a>(ds: &'a Dataset) -> impl FnMut(&Tensor, usize, f64) -> Result<Vec<f64>> + 'a {
            move |x: &Tensor, t: usize, s: f64| {
                (0..x.shape()[0])
                    .map(|i| true_response(ds, x.row(i), t as f64, Some(s)))
                    .collect()
            }
        }
        assert_eq!(amse_dosage(oracle(&ds), &ds, 65).unwrap(), 0.0);

        let c = 0.4;
        let v = amse_dosage(
            |x, t, s| oracle(&ds)(x, t, s).map(|ys| ys.iter().map(|y| y + c).collect()),
            &ds,
            9,
        )
        .unwrap();
        assert!((v - c * c).abs() < 1e-12, "{v}");

        // single-treatment: matches a direct per-unit quadrature
        let cfg1 = TcgaDoseConfig::sample(1, 10, 0.0, 2.0, &mut rng).unwrap();
        let ds1 = gen_tcga_dosage(10, &cfg1, 19).unwrap();
        let biased = |x: &Tensor, t: usize, s: f64| -> Result<Vec<f64>> {
            (0..x.shape()[0])
                .map(|i| true_response(&ds1, x.row(i), t as f64, Some(s)).map(|m| m + s))
                .collect()
        };
        let got = amse_dosage(biased, &ds1, 101).unwrap();
        // integral of s^2 over [0,1]
        let expect = 1.0 / 3.0;
        assert!((got - expect).abs() < 1e-3, "got {got}");
    }

    #[test]
    fn results_csv_column_order_is_fixed() {
        let rows = vec![MetricReport {
            metric: "amse".into(),
            value: 0.05,
            std: Some(0.01),
            n_repeats: 10,
            generator: "synthetic".into(),
            h_train_low: 0.0,
            h_train_high: 1.0,
            h_test_high: 1.0,
            seed: 42,
            config_hash: "abc123".into(),
        }];
        let csv = results_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "metric,value,std,n_repeats,generator,h_train_low,h_train_high,h_test_high,seed,config_hash"
        );
        assert_eq!(lines.next().unwrap(), "amse,0.05,0.01,10,synthetic,0,1,1,42,abc123");
    }

    #[test]
    fn mean_std_small_cases() {
        let (m, s) = mean_std(&[3.0]);
        assert_eq!(m, 3.0);
        assert!(s.is_none());
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s.unwrap(), 1.0);
    }
}

//! Training: outcome/propensity losses, Adam with an optional cosine
//! schedule, and the alternating adversarial loop.

use crate::error::{Error, Result};
use crate::graph::{BnMode, VarId};
use crate::model::TransTee;
use crate::rng::RngStream;
use crate::{Graph, ParamSet, Tensor};

/// Which propensity regularizer the adversarial loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    None,
    /// Point-estimate treatment regularization: L2 on (t - t_hat).
    Tr,
    /// Probabilistic TR: Gaussian negative log-likelihood.
    Ptr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub regularizer: Regularizer,
    /// Weight of the adversarial term in the outcome objective.
    pub lambda: f64,
    /// Inner propensity steps per outcome step.
    pub inner_steps: usize,
    pub log_every: usize,
    /// Abort when the outcome loss exceeds this (or goes non-finite).
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            batch_size: 500,
            lr: 0.01,
            schedule: Schedule::Cosine,
            regularizer: Regularizer::None,
            lambda: 0.5,
            inner_steps: 1,
            log_every: 50,
            divergence_limit: 1e6,
        }
    }
}

/// One training batch, rows already gathered.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub t: Tensor,
    pub s: Option<Tensor>,
    pub y: Tensor,
}

/// One logged point of the training trajectory.
#[derive(Debug, Clone, Copy)]
pub struct HistoryPoint {
    pub step: usize,
    pub loss_outcome: f64,
    /// NaN when no regularizer is active.
    pub loss_propensity: f64,
    /// NaN unless an eval hook was supplied.
    pub eval_metric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub points: Vec<HistoryPoint>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_outcome,loss_propensity,eval_metric\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.step, p.loss_outcome, p.loss_propensity, p.eval_metric
            ));
        }
        out
    }
}

// ---- losses ---------------------------------------------------------------

/// Mean squared error over the batch.
pub fn loss_outcome(g: &mut Graph, yhat: VarId, y: VarId) -> Result<VarId> {
    let diff = g.sub(y, yhat)?;
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// TR objective for the propensity head: mean (t - t_hat)^2.
pub fn loss_tr(g: &mut Graph, t: VarId, mean: VarId) -> Result<VarId> {
    let diff = g.sub(t, mean)?;
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// PTR objective: mean[(t - mu)^2 / (2 sigma^2) + log(sigma^2) / 2]
/// with sigma^2 = exp(raw).
pub fn loss_ptr(g: &mut Graph, t: VarId, mean: VarId, raw_var: VarId) -> Result<VarId> {
    let diff = g.sub(t, mean)?;
    let sq = g.square(diff);
    let neg_raw = g.neg(raw_var);
    let inv_var = g.exp(neg_raw);
    let quad = g.mul(sq, inv_var)?;
    let sum = g.add(quad, raw_var)?;
    let half = g.scale(sum, 0.5);
    g.mean_all(half)
}

// ---- optimizer ------------------------------------------------------------

/// Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} slots, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, grad) in grads.iter().enumerate() {
            let m = self.m[pi].data_mut();
            for (mv, &gv) in m.iter_mut().zip(grad.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self.v[pi].data_mut();
            for (vv, &gv) in v.iter_mut().zip(grad.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let p = params.get_mut(crate::params::ParamRef(pi)).data_mut();
            for ((pv, mv), vv) in p.iter_mut().zip(self.m[pi].data()).zip(self.v[pi].data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: base/2 * (1 + cos(pi * step/total)).
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn schedule_lr(cfg: &TrainConfig, step: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => cosine_lr(cfg.lr, step, cfg.iterations),
    }
}

// ---- training loop --------------------------------------------------------

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.last_dim();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), cols], data).unwrap()
}

fn gather_vec(y: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::vector(idx.iter().map(|&i| y.data()[i]).collect())
}

/// Training data as column tensors: x `[N, p]`, t `[N, n_treatments]`,
/// optional dosage s (same shape as t), y `[N]`.
pub struct TrainData<'a> {
    pub x: &'a Tensor,
    pub t: &'a Tensor,
    pub s: Option<&'a Tensor>,
    pub y: &'a Tensor,
}

impl<'a> TrainData<'a> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.t.shape()[0] != n || self.y.len() != n {
            return Err(Error::dim("x, t, y row counts differ"));
        }
        if let Some(s) = self.s {
            if s.shape() != self.t.shape() {
                return Err(Error::dim("s and t shapes differ"));
            }
        }
        Ok(())
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            x: gather_rows(self.x, idx),
            t: gather_rows(self.t, idx),
            s: self.s.map(|s| gather_rows(s, idx)),
            y: gather_vec(self.y, idx),
        }
    }
}

/// The continuous exposure the propensity head predicts: the dosage
/// when one exists, otherwise the treatment itself.
fn exposure(batch: &Batch) -> &Tensor {
    batch.s.as_ref().unwrap_or(&batch.t)
}

fn propensity_loss(
    g: &mut Graph,
    reg: Regularizer,
    t: VarId,
    mean: VarId,
    raw_var: VarId,
) -> Result<VarId> {
    match reg {
        Regularizer::None => Err(Error::contract("no regularizer active")),
        Regularizer::Tr => loss_tr(g, t, mean),
        Regularizer::Ptr => loss_ptr(g, t, mean, raw_var),
    }
}

/// One inner propensity (phi) ascent-on-theta / descent-on-phi step.
/// The covariate representation enters as a constant, so only the
/// propensity MLP moves.
fn phi_step(
    model: &mut TransTee,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Adam,
    lr: f64,
) -> Result<f64> {
    let f = model.forward(
        &batch.x,
        &batch.t,
        batch.s.as_ref(),
        BnMode::Train { update_stats: false },
        false,
        true,
        true,
    )?;
    let mut g = f.graph;
    let tv = g.constant(exposure(batch).reshaped(vec![batch.y.len()])?);
    let loss = propensity_loss(
        &mut g,
        cfg.regularizer,
        tv,
        f.prop_mean.unwrap(),
        f.prop_raw_var.unwrap(),
    )?;
    let value = g.value(loss).scalar_value();
    let grads = g.backward(loss)?;
    let grads = model.prop_params().collect_grads(&grads, &f.phi_vars);
    opt.step(model.prop_params_mut(), &grads, lr)?;
    Ok(value)
}

/// One outcome (theta) step: minimize L_outcome - lambda * L_prop.
/// With lambda == 0 the propensity head is skipped entirely.
fn theta_step(
    model: &mut TransTee,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Adam,
    lr: f64,
) -> Result<f64> {
    let adversarial = cfg.regularizer != Regularizer::None && cfg.lambda != 0.0;
    let f = model.forward(
        &batch.x,
        &batch.t,
        batch.s.as_ref(),
        BnMode::Train { update_stats: true },
        true,
        false,
        adversarial,
    )?;
    let mut g = f.graph;
    let yv = g.constant(batch.y.clone());
    let l_out = loss_outcome(&mut g, f.yhat, yv)?;
    let outcome_value = g.value(l_out).scalar_value();
    let loss = if adversarial {
        let tv = g.constant(exposure(batch).reshaped(vec![batch.y.len()])?);
        let l_prop = propensity_loss(
            &mut g,
            cfg.regularizer,
            tv,
            f.prop_mean.unwrap(),
            f.prop_raw_var.unwrap(),
        )?;
        let scaled = g.scale(l_prop, -cfg.lambda);
        g.add(l_out, scaled)?
    } else {
        l_out
    };
    let grads = g.backward(loss)?;
    let grads = model.params().collect_grads(&grads, &f.theta_vars);
    opt.step(model.params_mut(), &grads, lr)?;
    Ok(outcome_value)
}

/// Run the full loop. `rng` drives minibatch sampling only; `eval`
/// (if given) is called at every log point and its value recorded.
pub fn train(
    model: &mut TransTee,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    mut eval: Option<&mut dyn FnMut(&mut TransTee) -> f64>,
) -> Result<History> {
    data.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::contract("need at least 2 training rows"));
    }
    let bsz = cfg.batch_size.min(n).max(2);
    let adversarial = cfg.regularizer != Regularizer::None && cfg.lambda != 0.0;

    let mut theta_opt = Adam::new(model.params());
    let mut phi_opt = Adam::new(model.prop_params());
    let mut history = History::default();
    let mut batch_rng = rng.split(0x6261_7463);

    for step in 0..cfg.iterations {
        let lr = schedule_lr(cfg, step);
        let idx = batch_rng.sample_indices(n, bsz);
        let batch = data.batch(&idx);

        let mut prop_value = f64::NAN;
        if adversarial {
            for _ in 0..cfg.inner_steps.max(1) {
                prop_value = phi_step(model, &batch, cfg, &mut phi_opt, lr)?;
            }
        }
        let outcome_value = theta_step(model, &batch, cfg, &mut theta_opt, lr)?;

        if !outcome_value.is_finite() || outcome_value > cfg.divergence_limit {
            return Err(Error::Diverged {
                step,
                loss: outcome_value,
            });
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            let metric = eval.as_mut().map_or(f64::NAN, |f| f(model));
            log::info!(
                "step {step} loss_outcome {outcome_value:.6} loss_propensity {prop_value:.6}"
            );
            history.points.push(HistoryPoint {
                step,
                loss_outcome: outcome_value,
                loss_propensity: prop_value,
                eval_metric: metric,
            });
        }
    }
    if !model.params().all_finite() || !model.prop_params().all_finite() {
        return Err(Error::numeric("non-finite parameters after training"));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransTeeConfig;

    fn toy_data(n: usize, p: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = RngStream::new(seed);
        let x = Tensor::new(
            vec![n, p],
            (0..n * p).map(|_| rng.uniform()).collect::<Vec<_>>(),
        )
        .unwrap();
        let t = Tensor::new(vec![n, 1], (0..n).map(|_| rng.uniform()).collect::<Vec<_>>())
            .unwrap();
        // smooth ground truth, no noise
        let y = Tensor::vector(
            (0..n)
                .map(|i| {
                    let ti = t.data()[i];
                    let xi = x.row(i);
                    (2.0 * ti - 1.0).sin() + 0.5 * xi[0]
                })
                .collect(),
        );
        (x, t, y)
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::vector(vec![5.0, -3.0]));
        let mut opt = Adam::new(&params);
        for _ in 0..800 {
            let grads = vec![Tensor::vector(
                params.get(crate::params::ParamRef(0)).data().iter().map(|&v| 2.0 * v).collect(),
            )];
            opt.step(&mut params, &grads, 0.05).unwrap();
        }
        for &v in params.get(crate::params::ParamRef(0)).data() {
            assert!(v.abs() < 1e-3, "v = {v}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.01, 0, 100) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
        // monotone nonincreasing
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(0.01, s, 100);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn ptr_loss_at_true_gaussian_params() {
        // with mu = E[t] and sigma^2 = V[t], the loss is
        // 1/2 + log(V[t])/2
        let t: Vec<f64> = vec![0.1, 0.4, 0.6, 0.9, 0.3, 0.7];
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut g = Graph::new();
        let tv = g.constant(Tensor::vector(t.clone()));
        let mu = g.constant(Tensor::full(&[t.len()], mean));
        let raw = g.constant(Tensor::full(&[t.len()], var.ln()));
        let loss = loss_ptr(&mut g, tv, mu, raw).unwrap();
        let expect = 0.5 + 0.5 * var.ln();
        assert!((g.value(loss).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss() {
        let (x, t, y) = toy_data(64, 3, 42);
        let mut model = TransTee::new(
            TransTeeConfig::new(3, 1, false, 8, 2, 1),
            &mut RngStream::new(7),
        )
        .unwrap();
        let data = TrainData {
            x: &x,
            t: &t,
            s: None,
            y: &y,
        };
        let cfg = TrainConfig {
            iterations: 120,
            batch_size: 64,
            lr: 0.01,
            log_every: 10,
            ..TrainConfig::default()
        };
        let hist = train(&mut model, &data, &cfg, &mut RngStream::new(1), None).unwrap();
        let first = hist.points.first().unwrap().loss_outcome;
        let last = hist.points.last().unwrap().loss_outcome;
        assert!(last < 0.5 * first, "first {first} last {last}");
    }

    #[test]
    fn lambda_zero_matches_regularizer_none_exactly() {
        let (x, t, y) = toy_data(32, 3, 11);
        let data = TrainData {
            x: &x,
            t: &t,
            s: None,
            y: &y,
        };
        let run = |reg: Regularizer, lambda: f64| -> Vec<f64> {
            let mut model = TransTee::new(
                TransTeeConfig::new(3, 1, false, 8, 2, 1),
                &mut RngStream::new(9),
            )
            .unwrap();
            let cfg = TrainConfig {
                iterations: 30,
                batch_size: 16,
                regularizer: reg,
                lambda,
                log_every: 5,
                ..TrainConfig::default()
            };
            train(&mut model, &data, &cfg, &mut RngStream::new(2), None).unwrap();
            let probe_t = Tensor::new(vec![4, 1], vec![0.1, 0.4, 0.6, 0.9]).unwrap();
            let probe_x = Tensor::new(vec![4, 3], x.data()[..12].to_vec()).unwrap();
            model.predict(&probe_x, &probe_t, None).unwrap()
        };
        let plain = run(Regularizer::None, 0.5);
        let zeroed = run(Regularizer::Tr, 0.0);
        for (a, b) in plain.iter().zip(&zeroed) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (x, t, y) = toy_data(32, 3, 13);
        let data = TrainData {
            x: &x,
            t: &t,
            s: None,
            y: &y,
        };
        let run = || -> Vec<f64> {
            let mut model = TransTee::new(
                TransTeeConfig::new(3, 1, false, 8, 2, 1),
                &mut RngStream::new(5),
            )
            .unwrap();
            let cfg = TrainConfig {
                iterations: 40,
                batch_size: 16,
                regularizer: Regularizer::Ptr,
                log_every: 10,
                ..TrainConfig::default()
            };
            train(&mut model, &data, &cfg, &mut RngStream::new(3), None).unwrap();
            let probe_t = Tensor::new(vec![4, 1], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
            let probe_x = Tensor::new(vec![4, 3], x.data()[..12].to_vec()).unwrap();
            model.predict(&probe_x, &probe_t, None).unwrap()
        };
        let a = run();
        let b = run();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (x, t, mut y) = toy_data(16, 2, 21);
        for v in y.data_mut() {
            *v *= 1e12;
        }
        let data = TrainData {
            x: &x,
            t: &t,
            s: None,
            y: &y,
        };
        let mut model = TransTee::new(
            TransTeeConfig::new(2, 1, false, 4, 2, 1),
            &mut RngStream::new(1),
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &data, &cfg, &mut RngStream::new(1), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn phi_step_does_not_move_theta() {
        let (x, t, y) = toy_data(16, 3, 31);
        let mut model = TransTee::new(
            TransTeeConfig::new(3, 1, false, 8, 2, 1),
            &mut RngStream::new(4),
        )
        .unwrap();
        let before = model.params().clone();
        let phi_before = model.prop_params().clone();
        let batch = Batch {
            x: x.clone(),
            t: t.clone(),
            s: None,
            y: y.clone(),
        };
        let cfg = TrainConfig {
            regularizer: Regularizer::Tr,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(model.prop_params());
        phi_step(&mut model, &batch, &cfg, &mut opt, 0.01).unwrap();
        assert_eq!(&before, model.params());
        assert_ne!(&phi_before, model.prop_params());
    }
}

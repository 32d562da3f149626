//! Reference estimators: a plain MLP fed (x, t) directly, and a
//! branch-discretized estimator whose treatment-rounding error is the
//! failure mode bounded by the L(h-l)/delta result.

use crate::error::{Error, Result};
use crate::graph::VarId;
use crate::params::ParamRef;
use crate::rng::RngStream;
use crate::train::{Adam, History, HistoryPoint, TrainConfig, TrainData};
use crate::{Graph, ParamSet, Tensor};

fn mlp_layers(
    params: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    widths: &[usize],
    rng: &mut RngStream,
) -> Vec<(ParamRef, ParamRef)> {
    let mut layers = Vec::new();
    let mut prev = in_dim;
    for (i, &w) in widths.iter().chain(std::iter::once(&1)).enumerate() {
        layers.push((
            params.add_affine(format!("{prefix}.w{i}"), &[prev, w], prev, rng),
            params.add_affine(format!("{prefix}.b{i}"), &[w], prev, rng),
        ));
        prev = w;
    }
    layers
}

fn mlp_apply(
    g: &mut Graph,
    vars: &[VarId],
    layers: &[(ParamRef, ParamRef)],
    input: VarId,
) -> Result<VarId> {
    let mut h = input;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = g.linear(h, vars[w.0], vars[b.0])?;
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub p: usize,
    pub n_treatments: usize,
    pub has_dosage: bool,
    /// Hidden widths; the output layer (width 1) is implicit.
    pub widths: Vec<usize>,
}

impl MlpConfig {
    pub fn in_dim(&self) -> usize {
        self.p + self.n_treatments * (1 + self.has_dosage as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be >= 1"));
        }
        if self.p == 0 || self.n_treatments == 0 {
            return Err(Error::config("p and n_treatments must be >= 1"));
        }
        Ok(())
    }
}

/// S-learner: one MLP on the concatenated (x, t[, s]).
pub struct Mlp {
    cfg: MlpConfig,
    params: ParamSet,
    layers: Vec<(ParamRef, ParamRef)>,
}

impl Mlp {
    pub fn new(cfg: MlpConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let layers = mlp_layers(&mut params, "mlp", cfg.in_dim(), &cfg.widths, rng);
        Ok(Mlp {
            cfg,
            params,
            layers,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    fn concat_input(&self, x: &Tensor, t: &Tensor, s: Option<&Tensor>) -> Result<Tensor> {
        if s.is_some() != self.cfg.has_dosage {
            return Err(Error::contract("dosage presence mismatch"));
        }
        let n = x.shape()[0];
        if x.last_dim() != self.cfg.p || t.last_dim() != self.cfg.n_treatments {
            return Err(Error::dim(format!(
                "expected x[_, {}] and t[_, {}], got x[_, {}] t[_, {}]",
                self.cfg.p,
                self.cfg.n_treatments,
                x.last_dim(),
                t.last_dim()
            )));
        }
        let mut data = Vec::with_capacity(n * self.cfg.in_dim());
        for i in 0..n {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(t.row(i));
            if let Some(s) = s {
                data.extend_from_slice(s.row(i));
            }
        }
        Tensor::new(vec![n, self.cfg.in_dim()], data)
    }

    /// Graph forward over an already-concatenated input `[B, in_dim]`.
    pub fn forward(&self, g: &mut Graph, vars: &[VarId], input: VarId) -> Result<VarId> {
        mlp_apply(g, vars, &self.layers, input)
    }

    pub fn predict(&self, x: &Tensor, t: &Tensor, s: Option<&Tensor>) -> Result<Vec<f64>> {
        let input = self.concat_input(x, t, s)?;
        let n = input.shape()[0];
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let iv = g.constant(input);
        let out = self.forward(&mut g, &vars, iv)?;
        Ok(g.value(out).reshaped(vec![n])?.data().to_vec())
    }

    /// Plain Eq.-1 training on minibatches with Adam.
    pub fn train(
        &mut self,
        data: &TrainData,
        cfg: &TrainConfig,
        rng: &mut RngStream,
    ) -> Result<History> {
        let n = data.len();
        if n < 2 {
            return Err(Error::contract("need at least 2 training rows"));
        }
        let bsz = cfg.batch_size.min(n).max(2);
        let mut opt = Adam::new(&self.params);
        let mut batch_rng = rng.split(0x6261_7463);
        let mut history = History::default();
        for step in 0..cfg.iterations {
            let lr = match cfg.schedule {
                crate::train::Schedule::Constant => cfg.lr,
                crate::train::Schedule::Cosine => {
                    crate::train::cosine_lr(cfg.lr, step, cfg.iterations)
                }
            };
            let idx = batch_rng.sample_indices(n, bsz);
            let x = gather(data.x, &idx);
            let t = gather(data.t, &idx);
            let s = data.s.map(|s| gather(s, &idx));
            let y = Tensor::vector(idx.iter().map(|&i| data.y.data()[i]).collect());

            let input = self.concat_input(&x, &t, s.as_ref())?;
            let mut g = Graph::new();
            let vars = self.params.register(&mut g, true);
            let iv = g.constant(input);
            let out = self.forward(&mut g, &vars, iv)?;
            let yhat = g.reshape(out, vec![idx.len()])?;
            let yv = g.constant(y);
            let loss = crate::train::loss_outcome(&mut g, yhat, yv)?;
            let value = g.value(loss).scalar_value();
            if !value.is_finite() || value > cfg.divergence_limit {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = g.backward(loss)?;
            let grads = self.params.collect_grads(&grads, &vars);
            opt.step(&mut self.params, &grads, lr)?;
            if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
                history.points.push(HistoryPoint {
                    step,
                    loss_outcome: value,
                    loss_propensity: f64::NAN,
                    eval_metric: f64::NAN,
                });
            }
        }
        Ok(history)
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.last_dim();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).unwrap()
}

// ---- discretized estimator -------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiscretizedConfig {
    /// Number of uniform sub-intervals of [l, h]; delta+1 branches.
    pub delta: usize,
    pub l: f64,
    pub h: f64,
    pub widths: Vec<usize>,
}

impl DiscretizedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta < 1 {
            return Err(Error::config("delta must be >= 1"));
        }
        if self.l >= self.h {
            return Err(Error::config("need l < h"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be >= 1"));
        }
        Ok(())
    }

    /// Grid values {l + (h-l) k / delta}.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.delta)
            .map(|k| self.l + (self.h - self.l) * k as f64 / self.delta as f64)
            .collect()
    }

    /// Index of the nearest grid value, clamping out-of-range t to the
    /// nearest endpoint.
    pub fn branch_of(&self, t: f64) -> usize {
        let pos = (t - self.l) / (self.h - self.l) * self.delta as f64;
        (pos.round().max(0.0) as usize).min(self.delta)
    }
}

/// One covariate-only MLP per grid value; piecewise-constant in t.
pub struct Discretized {
    cfg: DiscretizedConfig,
    p: usize,
    params: ParamSet,
    branches: Vec<Vec<(ParamRef, ParamRef)>>,
}

impl Discretized {
    pub fn new(p: usize, cfg: DiscretizedConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let branches = (0..=cfg.delta)
            .map(|k| mlp_layers(&mut params, &format!("branch{k}"), p, &cfg.widths, rng))
            .collect();
        Ok(Discretized {
            cfg,
            p,
            params,
            branches,
        })
    }

    pub fn config(&self) -> &DiscretizedConfig {
        &self.cfg
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn predict(&self, x: &Tensor, t: &Tensor) -> Result<Vec<f64>> {
        let n = x.shape()[0];
        if x.last_dim() != self.p {
            return Err(Error::dim(format!("expected {} covariates", self.p)));
        }
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let mut out = vec![0.0; n];
        let mut by_branch: Vec<Vec<usize>> = vec![Vec::new(); self.cfg.delta + 1];
        for i in 0..n {
            by_branch[self.cfg.branch_of(t.row(i)[0])].push(i);
        }
        for (k, rows) in by_branch.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xv = g.constant(gather(x, rows));
            let o = mlp_apply(&mut g, &vars, &self.branches[k], xv)?;
            let vals = g.value(o).reshaped(vec![rows.len()])?;
            for (slot, &i) in rows.iter().enumerate() {
                out[i] = vals.data()[slot];
            }
        }
        Ok(out)
    }

    /// One joint Adam step per iteration: per-branch squared errors
    /// weighted by branch occupancy sum to the batch MSE.
    pub fn train(
        &mut self,
        data: &TrainData,
        cfg: &TrainConfig,
        rng: &mut RngStream,
    ) -> Result<History> {
        let n = data.len();
        if n < 2 {
            return Err(Error::contract("need at least 2 training rows"));
        }
        let bsz = cfg.batch_size.min(n).max(2);
        let mut opt = Adam::new(&self.params);
        let mut batch_rng = rng.split(0x6261_7463);
        let mut history = History::default();
        for step in 0..cfg.iterations {
            let lr = match cfg.schedule {
                crate::train::Schedule::Constant => cfg.lr,
                crate::train::Schedule::Cosine => {
                    crate::train::cosine_lr(cfg.lr, step, cfg.iterations)
                }
            };
            let idx = batch_rng.sample_indices(n, bsz);
            let mut by_branch: Vec<Vec<usize>> = vec![Vec::new(); self.cfg.delta + 1];
            for &i in &idx {
                by_branch[self.cfg.branch_of(data.t.row(i)[0])].push(i);
            }
            let mut g = Graph::new();
            let vars = self.params.register(&mut g, true);
            let mut total: Option<VarId> = None;
            for (k, rows) in by_branch.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let xv = g.constant(gather(data.x, rows));
                let o = mlp_apply(&mut g, &vars, &self.branches[k], xv)?;
                let yhat = g.reshape(o, vec![rows.len()])?;
                let yv = g.constant(Tensor::vector(
                    rows.iter().map(|&i| data.y.data()[i]).collect(),
                ));
                let diff = g.sub(yv, yhat)?;
                let sq = g.square(diff);
                let sum = g.sum_all(sq);
                total = Some(match total {
                    None => sum,
                    Some(acc) => g.add(acc, sum)?,
                });
            }
            let sum = total.expect("batch is nonempty");
            let loss = g.scale(sum, 1.0 / idx.len() as f64);
            let value = g.value(loss).scalar_value();
            if !value.is_finite() || value > cfg.divergence_limit {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = g.backward(loss)?;
            let grads = self.params.collect_grads(&grads, &vars);
            opt.step(&mut self.params, &grads, lr)?;
            if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
                history.points.push(HistoryPoint {
                    step,
                    loss_outcome: value,
                    loss_propensity: f64::NAN,
                    eval_metric: f64::NAN,
                });
            }
        }
        Ok(history)
    }
}

/// Max |mu(t) - mu(nearest grid value)| over uniform probes of [l, h],
/// together with the L(h-l)/delta bound it must respect.
pub fn prop1_bound_check(
    mu: impl Fn(f64) -> f64,
    lipschitz: f64,
    l: f64,
    h: f64,
    delta: usize,
    n_probes: usize,
) -> (f64, f64) {
    let cfg = DiscretizedConfig {
        delta,
        l,
        h,
        widths: vec![1],
    };
    let grid = cfg.grid();
    let mut max_err = 0.0f64;
    for i in 0..n_probes {
        let t = l + (h - l) * i as f64 / (n_probes - 1).max(1) as f64;
        let err = (mu(t) - mu(grid[cfg.branch_of(t)])).abs();
        max_err = max_err.max(err);
    }
    (max_err, lipschitz * (h - l) / delta as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff_check;
    use crate::RngStream;

    fn cfg(p: usize) -> MlpConfig {
        MlpConfig {
            p,
            n_treatments: 1,
            has_dosage: false,
            widths: vec![8, 8],
        }
    }

    #[test]
    fn zero_weight_mlp_outputs_its_bias() {
        let mut mlp = Mlp::new(cfg(3), &mut RngStream::new(1)).unwrap();
        for t in mlp.params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let last_bias = mlp.layers.last().unwrap().1;
        *mlp.params.get_mut(last_bias) = Tensor::vector(vec![2.5]);
        let x = Tensor::new(vec![2, 3], vec![1.0, -1.0, 0.5, 0.0, 3.0, 2.0]).unwrap();
        let t = Tensor::new(vec![2, 1], vec![0.3, 0.9]).unwrap();
        assert_eq!(mlp.predict(&x, &t, None).unwrap(), vec![2.5, 2.5]);
    }

    #[test]
    fn mlp_gradcheck() {
        let mut rng = RngStream::new(3);
        let mlp = Mlp::new(cfg(3), &mut RngStream::new(3)).unwrap();
        let x = Tensor::new(
            vec![4, 3],
            (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let t = Tensor::new(vec![4, 1], (0..4).map(|_| rng.uniform()).collect::<Vec<_>>()).unwrap();
        let y = Tensor::vector((0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect());
        let input = mlp.concat_input(&x, &t, None).unwrap();
        let mut params = mlp.params.clone();
        let layers = mlp.layers.clone();
        let err = finite_diff_check(
            |g, vars| {
                let iv = g.constant(input.clone());
                let o = mlp_apply(g, vars, &layers, iv)?;
                let yhat = g.reshape(o, vec![4])?;
                let yv = g.constant(y.clone());
                let d = g.sub(yhat, yv)?;
                let sq = g.square(d);
                g.mean_all(sq)
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn mlp_continuous_in_t() {
        let mlp = Mlp::new(cfg(2), &mut RngStream::new(5)).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let y0 = mlp.predict(&x, &Tensor::new(vec![1, 1], vec![0.5]).unwrap(), None).unwrap()[0];
        let y1 = mlp
            .predict(&x, &Tensor::new(vec![1, 1], vec![0.5 + 1e-9]).unwrap(), None)
            .unwrap()[0];
        assert!((y0 - y1).abs() < 1e-6);
    }

    #[test]
    fn mlp_training_reduces_loss() {
        let mut rng = RngStream::new(7);
        let n = 64;
        let x = Tensor::new(vec![n, 2], (0..n * 2).map(|_| rng.uniform()).collect::<Vec<_>>())
            .unwrap();
        let t = Tensor::new(vec![n, 1], (0..n).map(|_| rng.uniform()).collect::<Vec<_>>()).unwrap();
        let y = Tensor::vector(
            (0..n)
                .map(|i| x.row(i)[0] + 2.0 * t.row(i)[0])
                .collect(),
        );
        let mut mlp = Mlp::new(cfg(2), &mut RngStream::new(8)).unwrap();
        let data = TrainData {
            x: &x,
            t: &t,
            s: None,
            y: &y,
        };
        let tc = TrainConfig {
            iterations: 200,
            batch_size: 64,
            log_every: 20,
            ..TrainConfig::default()
        };
        let hist = mlp.train(&data, &tc, &mut RngStream::new(9)).unwrap();
        let first = hist.points.first().unwrap().loss_outcome;
        let last = hist.points.last().unwrap().loss_outcome;
        assert!(last < 0.1 * first, "first {first} last {last}");
    }

    #[test]
    fn nearest_grid_arithmetic() {
        let c = DiscretizedConfig {
            delta: 1,
            l: 0.0,
            h: 1.0,
            widths: vec![4],
        };
        assert_eq!(c.branch_of(0.3), 0);
        assert_eq!(c.branch_of(0.7), 1);
        // out of range clamps to endpoints
        assert_eq!(c.branch_of(-5.0), 0);
        assert_eq!(c.branch_of(9.0), 1);
        let c4 = DiscretizedConfig {
            delta: 4,
            l: 1.0,
            h: 2.0,
            widths: vec![4],
        };
        assert_eq!(c4.grid(), vec![1.0, 1.25, 1.5, 1.75, 2.0]);
        assert_eq!(c4.branch_of(1.3), 1);
        assert_eq!(c4.branch_of(1.9), 4);
    }

    #[test]
    fn same_cell_gives_identical_outputs() {
        let d = Discretized::new(
            3,
            DiscretizedConfig {
                delta: 4,
                l: 0.0,
                h: 1.0,
                widths: vec![6],
            },
            &mut RngStream::new(11),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.8]).unwrap();
        let a = d.predict(&x, &Tensor::new(vec![1, 1], vec![0.26]).unwrap()).unwrap()[0];
        let b = d.predict(&x, &Tensor::new(vec![1, 1], vec![0.22]).unwrap()).unwrap()[0];
        let c = d.predict(&x, &Tensor::new(vec![1, 1], vec![0.40]).unwrap()).unwrap()[0];
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn discretized_param_count_grows_with_delta() {
        let mut prev = 0;
        for delta in [1, 2, 4, 8] {
            let d = Discretized::new(
                5,
                DiscretizedConfig {
                    delta,
                    l: 0.0,
                    h: 1.0,
                    widths: vec![8],
                },
                &mut RngStream::new(13),
            )
            .unwrap();
            assert!(d.count_params() > prev);
            prev = d.count_params();
        }
    }

    #[test]
    fn discretized_training_fits_a_step_function() {
        let mut rng = RngStream::new(17);
        let n = 64;
        let x = Tensor::new(vec![n, 2], (0..n * 2).map(|_| rng.uniform()).collect::<Vec<_>>())
            .unwrap();
        let t = Tensor::new(vec![n, 1], (0..n).map(|_| rng.uniform()).collect::<Vec<_>>()).unwrap();
        let y = Tensor::vector(
            (0..n)
                .map(|i| if t.row(i)[0] > 0.5 { 1.0 } else { -1.0 })
                .collect(),
        );
        let mut d = Discretized::new(
            2,
            DiscretizedConfig {
                delta: 1,
                l: 0.0,
                h: 1.0,
                widths: vec![4],
            },
            &mut RngStream::new(19),
        )
        .unwrap();
        let data = TrainData {
            x: &x,
            t: &t,
            s: None,
            y: &y,
        };
        let tc = TrainConfig {
            iterations: 300,
            batch_size: 64,
            log_every: 50,
            ..TrainConfig::default()
        };
        let hist = d.train(&data, &tc, &mut RngStream::new(23)).unwrap();
        assert!(hist.points.last().unwrap().loss_outcome < 0.05);
    }

    #[test]
    fn prop1_bound_holds_for_sin() {
        // mu(t) = sin(L t) has Lipschitz constant L
        for lip in [1.0, std::f64::consts::TAU] {
            for delta in [2usize, 4, 8] {
                let (err, bound) =
                    prop1_bound_check(|t| (lip * t).sin(), lip, 0.0, 1.0, delta, 2000);
                assert!(err <= bound + 1e-12, "err {err} bound {bound}");
            }
        }
    }
}

//! The TransTEE estimator: per-covariate embeddings, treatment/dosage
//! embeddings, covariate and treatment self-attention stacks, a
//! treatment-covariate cross-attention stack with a pooled prediction
//! head, and the propensity MLP used by the adversarial regularizers.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::attention::{
    cross_block, encoder_block, AttentionConfig, CrossLayerRefs, EncoderLayerRefs,
};
use crate::error::{Error, Result};
use crate::graph::{BnMode, VarId};
use crate::params::ParamRef;
use crate::rng::RngStream;
use crate::{Graph, NormState, ParamSet, RngStream as Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransTeeConfig {
    /// Covariate count.
    pub p: usize,
    /// Simultaneous treatment count.
    pub n_treatments: usize,
    pub has_dosage: bool,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Hidden width of the output MLP (defaults to d_model).
    pub head_hidden: usize,
    /// Hidden width of the propensity MLP.
    pub prop_hidden: usize,
}

impl TransTeeConfig {
    pub fn new(p: usize, n_treatments: usize, has_dosage: bool, d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        TransTeeConfig {
            p,
            n_treatments,
            has_dosage,
            d_model,
            n_heads,
            n_layers,
            head_hidden: d_model,
            prop_hidden: d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 || self.n_treatments < 1 {
            return Err(Error::config("p and n_treatments must be >= 1"));
        }
        if self.d_model < self.n_heads {
            return Err(Error::config("d_model must be >= n_heads"));
        }
        AttentionConfig::new(self.d_model, self.n_heads, self.n_layers).map(|_| ())
    }
}

#[derive(Debug, Clone)]
struct OutcomeRefs {
    cov_w: ParamRef,
    cov_b: ParamRef,
    t_w: ParamRef,
    t_b: ParamRef,
    s_w: Option<ParamRef>,
    s_b: Option<ParamRef>,
    fuse_w: Option<ParamRef>,
    fuse_b: Option<ParamRef>,
    cov_layers: Vec<EncoderLayerRefs>,
    trt_layers: Vec<EncoderLayerRefs>,
    cross_layers: Vec<CrossLayerRefs>,
    head_w1: ParamRef,
    head_b1: ParamRef,
    head_w2: ParamRef,
    head_b2: ParamRef,
}

#[derive(Debug, Clone)]
struct PropRefs {
    w1: ParamRef,
    b1: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
}

/// Propensity output mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityMode {
    /// Point prediction t-hat (TR).
    Point,
    /// Gaussian (mean, variance) with variance = exp(raw) (PTR).
    Gaussian,
}

/// Everything one forward pass exposes.
pub struct Forward {
    pub graph: Graph,
    pub theta_vars: Vec<VarId>,
    pub phi_vars: Vec<VarId>,
    /// Predictions, shape `[B]`.
    pub yhat: VarId,
    /// Pooled covariate-encoder output, shape `[B, d_model]`.
    pub cov_pooled: VarId,
    /// Per cross layer, per head: weights `[B, n_treatments, p]`.
    pub cross_weights: Vec<Vec<VarId>>,
    /// Propensity mean per treatment slot, shape `[B]` (if requested).
    pub prop_mean: Option<VarId>,
    /// Raw log-variance, shape `[B]` (if requested).
    pub prop_raw_var: Option<VarId>,
}

/// Interpretability record of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub predictions: Vec<f64>,
    /// Head-averaged cross weights per layer, each `[B, n, p]`.
    pub cross_weights: Vec<Tensor>,
    pub propensity: Option<(Vec<f64>, Vec<f64>)>,
}

pub struct TransTee {
    cfg: TransTeeConfig,
    params: ParamSet,
    prop_params: ParamSet,
    refs: OutcomeRefs,
    prop_refs: PropRefs,
    cov_bn: Vec<NormState>,
    trt_bn: Vec<NormState>,
}

impl TransTee {
    pub fn new(cfg: TransTeeConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let attn_cfg = AttentionConfig::new(cfg.d_model, cfg.n_heads, cfg.n_layers)?;
        let d = cfg.d_model;
        let mut params = ParamSet::new();
        let cov_w = params.add_affine("embed.cov.w", &[cfg.p, d], 1, rng);
        let cov_b = params.add_affine("embed.cov.b", &[cfg.p, d], 1, rng);
        let t_w = params.add_affine("embed.t.w", &[1, d], 1, rng);
        let t_b = params.add_affine("embed.t.b", &[d], 1, rng);
        let (s_w, s_b, fuse_w, fuse_b) = if cfg.has_dosage {
            (
                Some(params.add_affine("embed.s.w", &[1, d], 1, rng)),
                Some(params.add_affine("embed.s.b", &[d], 1, rng)),
                Some(params.add_affine("embed.fuse.w", &[2 * d, d], 2 * d, rng)),
                Some(params.add_affine("embed.fuse.b", &[d], 2 * d, rng)),
            )
        } else {
            (None, None, None, None)
        };
        let cov_layers = (0..cfg.n_layers)
            .map(|l| EncoderLayerRefs::init(&mut params, &format!("cov_enc.{l}"), &attn_cfg, rng))
            .collect();
        let trt_layers = (0..cfg.n_layers)
            .map(|l| EncoderLayerRefs::init(&mut params, &format!("trt_enc.{l}"), &attn_cfg, rng))
            .collect();
        let cross_layers = (0..cfg.n_layers)
            .map(|l| CrossLayerRefs::init(&mut params, &format!("cross.{l}"), &attn_cfg, rng))
            .collect();
        let head_w1 = params.add_affine("head.w1", &[d, cfg.head_hidden], d, rng);
        let head_b1 = params.add_affine("head.b1", &[cfg.head_hidden], d, rng);
        let head_w2 = params.add_affine("head.w2", &[cfg.head_hidden, 1], cfg.head_hidden, rng);
        let head_b2 = params.add_affine("head.b2", &[1], cfg.head_hidden, rng);

        let mut prop_params = ParamSet::new();
        let prop_refs = PropRefs {
            w1: prop_params.add_affine("prop.w1", &[d, cfg.prop_hidden], d, rng),
            b1: prop_params.add_affine("prop.b1", &[cfg.prop_hidden], d, rng),
            w2: prop_params.add_affine("prop.w2", &[cfg.prop_hidden, 2], cfg.prop_hidden, rng),
            b2: prop_params.add_affine("prop.b2", &[2], cfg.prop_hidden, rng),
        };

        Ok(TransTee {
            cfg,
            params,
            prop_params,
            refs: OutcomeRefs {
                cov_w,
                cov_b,
                t_w,
                t_b,
                s_w,
                s_b,
                fuse_w,
                fuse_b,
                cov_layers,
                trt_layers,
                cross_layers,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
            prop_refs,
            cov_bn: (0..cfg.n_layers).map(|_| NormState::new(d)).collect(),
            trt_bn: (0..cfg.n_layers).map(|_| NormState::new(d)).collect(),
        })
    }

    pub fn config(&self) -> &TransTeeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn prop_params(&self) -> &ParamSet {
        &self.prop_params
    }

    pub fn prop_params_mut(&mut self) -> &mut ParamSet {
        &mut self.prop_params
    }

    /// Trainable scalar count of the outcome model (theta).
    pub fn count_theta_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn count_phi_params(&self) -> usize {
        self.prop_params.scalar_count()
    }

    /// Per-covariate embedding: row i of the output is
    /// `x_i * w_i + b_i`, so row i depends only on covariate i.
    fn embed_covariates(&self, g: &mut Graph, vars: &[VarId], x: &Tensor) -> Result<VarId> {
        if x.last_dim() != self.cfg.p {
            return Err(Error::dim(format!(
                "expected {} covariates, got {}",
                self.cfg.p,
                x.last_dim()
            )));
        }
        g.embed_tokens(x, vars[self.refs.cov_w.0], vars[self.refs.cov_b.0])
    }

    /// Shared scalar->d treatment embedding, with optional dosage fusion.
    fn embed_treatment(
        &self,
        g: &mut Graph,
        vars: &[VarId],
        t: &Tensor,
        s: Option<&Tensor>,
    ) -> Result<VarId> {
        if s.is_some() != self.cfg.has_dosage {
            return Err(Error::contract(format!(
                "dosage presence mismatch: model has_dosage={}, dosage given={}",
                self.cfg.has_dosage,
                s.is_some()
            )));
        }
        let (b, n) = (t.shape()[0], t.shape()[1]);
        if n != self.cfg.n_treatments {
            return Err(Error::dim(format!(
                "expected {} treatment slots, got {}",
                self.cfg.n_treatments, n
            )));
        }
        let tv = g.constant(t.reshaped(vec![b * n, 1])?);
        let mt = g.linear(tv, vars[self.refs.t_w.0], vars[self.refs.t_b.0])?;
        let fused = match s {
            None => mt,
            Some(sv) => {
                let sv = g.constant(sv.reshaped(vec![b * n, 1])?);
                let ms = g.linear(sv, vars[self.refs.s_w.unwrap().0], vars[self.refs.s_b.unwrap().0])?;
                let cat = g.concat_last(&[mt, ms])?;
                g.linear(cat, vars[self.refs.fuse_w.unwrap().0], vars[self.refs.fuse_b.unwrap().0])?
            }
        };
        g.reshape(fused, vec![b, n, self.cfg.d_model])
    }

    /// Full forward pass over a batch.
    ///
    /// `theta_grad` / `phi_grad` control which parameter group is
    /// registered as differentiable; the other enters as constants, so
    /// the adversarial steps get exactly the gradient routing they
    /// need (the propensity loss reaches theta only through the pooled
    /// covariate representation).
    pub fn forward(
        &mut self,
        x: &Tensor,
        t: &Tensor,
        s: Option<&Tensor>,
        mode: BnMode,
        theta_grad: bool,
        phi_grad: bool,
        with_propensity: bool,
    ) -> Result<Forward> {
        let mut g = Graph::new();
        let theta_vars = self.params.register(&mut g, theta_grad);
        let phi_vars = self.prop_params.register(&mut g, phi_grad);

        let mut mx = self.embed_covariates(&mut g, &theta_vars, x)?;
        for (l, layer) in self.refs.cov_layers.iter().enumerate() {
            mx = encoder_block(&mut g, &theta_vars, layer, mx, &mut self.cov_bn[l], mode)?;
        }
        let cov_pooled = g.mean_axis(mx, 1)?;

        let mut mst = self.embed_treatment(&mut g, &theta_vars, t, s)?;
        for (l, layer) in self.refs.trt_layers.iter().enumerate() {
            mst = encoder_block(&mut g, &theta_vars, layer, mst, &mut self.trt_bn[l], mode)?;
        }

        let mut m = mst;
        let mut cross_weights = Vec::with_capacity(self.refs.cross_layers.len());
        for layer in &self.refs.cross_layers {
            let (out, weights) = cross_block(&mut g, &theta_vars, layer, m, mx)?;
            m = out;
            cross_weights.push(weights);
        }

        let pooled = g.mean_axis(m, 1)?;
        let h = g.linear(pooled, theta_vars[self.refs.head_w1.0], theta_vars[self.refs.head_b1.0])?;
        let h = g.relu(h);
        let out = g.linear(h, theta_vars[self.refs.head_w2.0], theta_vars[self.refs.head_b2.0])?;
        let bsz = x.shape()[0];
        let yhat = g.reshape(out, vec![bsz])?;

        let (prop_mean, prop_raw_var) = if with_propensity {
            let h = g.linear(cov_pooled, phi_vars[self.prop_refs.w1.0], phi_vars[self.prop_refs.b1.0])?;
            let h = g.relu(h);
            let o = g.linear(h, phi_vars[self.prop_refs.w2.0], phi_vars[self.prop_refs.b2.0])?;
            let mean = g.slice_last(o, 0, 1)?;
            let raw = g.slice_last(o, 1, 1)?;
            (
                Some(g.reshape(mean, vec![bsz])?),
                Some(g.reshape(raw, vec![bsz])?),
            )
        } else {
            (None, None)
        };

        Ok(Forward {
            graph: g,
            theta_vars,
            phi_vars,
            yhat,
            cov_pooled,
            cross_weights,
            prop_mean,
            prop_raw_var,
        })
    }

    /// Eval-mode predictions (running BN statistics, no gradients).
    pub fn predict(&mut self, x: &Tensor, t: &Tensor, s: Option<&Tensor>) -> Result<Vec<f64>> {
        let f = self.forward(x, t, s, BnMode::Eval, false, false, false)?;
        Ok(f.graph.value(f.yhat).data().to_vec())
    }

    /// Eval-mode forward with the interpretability trace.
    pub fn predict_traced(
        &mut self,
        x: &Tensor,
        t: &Tensor,
        s: Option<&Tensor>,
        prop_mode: Option<PropensityMode>,
    ) -> Result<ForwardTrace> {
        let f = self.forward(x, t, s, BnMode::Eval, false, false, prop_mode.is_some())?;
        Ok(self.trace_from(&f, prop_mode))
    }

    /// Head-averaged weights and propensity values out of a forward.
    pub fn trace_from(&self, f: &Forward, prop_mode: Option<PropensityMode>) -> ForwardTrace {
        let mut layers = Vec::with_capacity(f.cross_weights.len());
        for heads in &f.cross_weights {
            let mut avg: Option<Tensor> = None;
            for &w in heads {
                let wv = f.graph.value(w);
                match avg.as_mut() {
                    None => avg = Some(wv.clone()),
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(wv.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let mut avg = avg.expect("at least one head");
            let nh = heads.len() as f64;
            for v in avg.data_mut() {
                *v /= nh;
            }
            layers.push(avg);
        }
        let propensity = prop_mode.map(|pm| {
            let mean = f.graph.value(f.prop_mean.unwrap()).data().to_vec();
            let var = match pm {
                PropensityMode::Point => vec![],
                PropensityMode::Gaussian => f
                    .graph
                    .value(f.prop_raw_var.unwrap())
                    .data()
                    .iter()
                    .map(|&r| r.exp())
                    .collect(),
            };
            (mean, var)
        });
        ForwardTrace {
            predictions: f.graph.value(f.yhat).data().to_vec(),
            cross_weights: layers,
            propensity,
        }
    }

    /// Propensity prediction from covariates alone (eval mode).
    /// Returns (mean, variance); variance is `exp(raw)` and therefore
    /// strictly positive.
    pub fn forward_propensity(
        &mut self,
        x: &Tensor,
        mode: PropensityMode,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = x.shape()[0];
        let n = self.cfg.n_treatments;
        let t = Tensor::zeros(&[b, n]);
        let s = if self.cfg.has_dosage {
            Some(Tensor::zeros(&[b, n]))
        } else {
            None
        };
        let f = self.forward(x, &t, s.as_ref(), BnMode::Eval, false, false, true)?;
        let mean = f.graph.value(f.prop_mean.unwrap()).data().to_vec();
        let var = match mode {
            PropensityMode::Point => vec![],
            PropensityMode::Gaussian => f
                .graph
                .value(f.prop_raw_var.unwrap())
                .data()
                .iter()
                .map(|&r| r.exp())
                .collect(),
        };
        Ok((mean, var))
    }

    pub fn bn_states(&self) -> (&[NormState], &[NormState]) {
        (&self.cov_bn, &self.trt_bn)
    }

    // ---- checkpointing ---------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "transtee-ckpt v1 p={} n={} dosage={} d={} heads={} layers={} head_hidden={} prop_hidden={}",
            self.cfg.p,
            self.cfg.n_treatments,
            self.cfg.has_dosage as u8,
            self.cfg.d_model,
            self.cfg.n_heads,
            self.cfg.n_layers,
            self.cfg.head_hidden,
            self.cfg.prop_hidden
        )?;
        writeln!(f, "set theta")?;
        for (name, t) in self.params.iter() {
            write!(f, "{}", crate::params::tensor_to_line(name, t))?;
        }
        writeln!(f, "set phi")?;
        for (name, t) in self.prop_params.iter() {
            write!(f, "{}", crate::params::tensor_to_line(name, t))?;
        }
        for (tag, states) in [("cov", &self.cov_bn), ("trt", &self.trt_bn)] {
            for (l, st) in states.iter().enumerate() {
                writeln!(f, "norm {tag}.{l} {}", st.running_mean.len())?;
                let line = |vals: &[f64]| {
                    vals.iter()
                        .map(|v| format!("{:016x}", v.to_bits()))
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                writeln!(f, "{}", line(&st.running_mean))?;
                writeln!(f, "{}", line(&st.running_var))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Schema("empty checkpoint".into()))?;
        let header = header?;
        let mut cfgmap = std::collections::HashMap::new();
        for tok in header.split_whitespace().skip(2) {
            if let Some((k, v)) = tok.split_once('=') {
                cfgmap.insert(k.to_string(), v.to_string());
            }
        }
        let geti = |k: &str| -> Result<usize> {
            cfgmap
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Schema(format!("checkpoint header missing {k}")))
        };
        let cfg = TransTeeConfig {
            p: geti("p")?,
            n_treatments: geti("n")?,
            has_dosage: geti("dosage")? != 0,
            d_model: geti("d")?,
            n_heads: geti("heads")?,
            n_layers: geti("layers")?,
            head_hidden: geti("head_hidden")?,
            prop_hidden: geti("prop_hidden")?,
        };
        let mut model = TransTee::new(cfg, &mut Rng::new(0))?;

        enum Section {
            Theta,
            Phi,
        }
        let mut section = Section::Theta;
        let mut param_idx = 0usize;
        while let Some((lineno, line)) = lines.next() {
            let line = line?;
            let lineno = lineno + 1;
            if line.starts_with("set ") {
                section = match line.trim() {
                    "set theta" => {
                        param_idx = 0;
                        Section::Theta
                    }
                    "set phi" => {
                        param_idx = 0;
                        Section::Phi
                    }
                    other => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("unknown section '{other}'"),
                        })
                    }
                };
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut toks = rest.split_whitespace();
                let name = toks.next().unwrap_or_default().to_string();
                let rank: usize = toks
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: "bad rank".into(),
                    })?;
                let shape: Vec<usize> = toks.filter_map(|v| v.parse().ok()).collect();
                if shape.len() != rank {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "rank/shape mismatch".into(),
                    });
                }
                let n: usize = shape.iter().product();
                let (_, vline) = lines.next().ok_or(Error::Parse {
                    line: lineno,
                    msg: "missing value line".into(),
                })?;
                let vals: Vec<f64> = crate::params::parse_hex_values(&vline?, n, lineno + 1)?;
                let set = match section {
                    Section::Theta => &mut model.params,
                    Section::Phi => &mut model.prop_params,
                };
                let r = ParamRef(param_idx);
                if param_idx >= set.len() || set.name(r) != name || set.get(r).shape() != &shape[..]
                {
                    return Err(Error::Schema(format!(
                        "unexpected parameter '{name}' at position {param_idx}"
                    )));
                }
                *set.get_mut(r) = Tensor::new(shape, vals)?;
                param_idx += 1;
            } else if let Some(rest) = line.strip_prefix("norm ") {
                let mut toks = rest.split_whitespace();
                let name = toks.next().unwrap_or_default();
                let dim: usize = toks.next().and_then(|v| v.parse().ok()).ok_or(Error::Parse {
                    line: lineno,
                    msg: "bad norm dim".into(),
                })?;
                let (_, mline) = lines.next().ok_or(Error::Parse {
                    line: lineno,
                    msg: "missing running mean".into(),
                })?;
                let (_, vline) = lines.next().ok_or(Error::Parse {
                    line: lineno,
                    msg: "missing running var".into(),
                })?;
                let mean: Vec<f64> = crate::params::parse_hex_values(&mline?, dim, lineno + 1)?;
                let var: Vec<f64> = crate::params::parse_hex_values(&vline?, dim, lineno + 2)?;
                let (tag, idx) = name.split_once('.').ok_or(Error::Parse {
                    line: lineno,
                    msg: "bad norm name".into(),
                })?;
                let idx: usize = idx.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: "bad norm index".into(),
                })?;
                let st = match tag {
                    "cov" => &mut model.cov_bn[idx],
                    "trt" => &mut model.trt_bn[idx],
                    _ => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("unknown norm site '{tag}'"),
                        })
                    }
                };
                st.running_mean = mean;
                st.running_var = var;
            } else if !line.trim().is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unexpected line '{line}'"),
                });
            }
        }
        Ok(model)
    }
}

/// Average cross-attention weights over batch, heads, and layers, then
/// sum within covariate groups. `groups` must partition `0..p`.
pub fn attention_summary(traces: &[ForwardTrace], groups: &[Vec<usize>]) -> Result<Vec<f64>> {
    let first = traces
        .first()
        .and_then(|t| t.cross_weights.first())
        .ok_or_else(|| Error::contract("attention_summary needs at least one trace"))?;
    let p = first.shape()[2];
    let mut seen = vec![false; p];
    for grp in groups {
        for &i in grp {
            if i >= p || seen[i] {
                return Err(Error::contract(format!(
                    "groups must partition 0..{p}; index {i} duplicated or out of range"
                )));
            }
            seen[i] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::contract(format!("groups must cover all {p} covariates")));
    }

    let mut per_cov = vec![0.0f64; p];
    let mut count = 0usize;
    for trace in traces {
        for layer in &trace.cross_weights {
            let (b, n, pp) = (layer.shape()[0], layer.shape()[1], layer.shape()[2]);
            debug_assert_eq!(pp, p);
            for row in layer.data().chunks(p) {
                for (acc, &w) in per_cov.iter_mut().zip(row) {
                    *acc += w;
                }
            }
            count += b * n;
        }
    }
    for v in per_cov.iter_mut() {
        *v /= count as f64;
    }
    Ok(groups
        .iter()
        .map(|grp| grp.iter().map(|&i| per_cov[i]).sum())
        .collect())
}

//! Scaled dot-product attention, multi-head attention, and the residual
//! encoder / cross-attention blocks.
//!
//! All blocks are pure functions of (parameters, inputs) and operate on
//! batched token tensors `[B, tokens, d_model]`. No positional
//! encodings anywhere: token identity is carried by the embedding
//! parameters, so every block is permutation-equivariant over tokens.

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NormState, VarId};
use crate::params::{ParamRef, ParamSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Width/stack configuration shared by all attention stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_layers: usize,
}

impl AttentionConfig {
    /// Default per-head widths: `d_model / n_heads`.
    pub fn new(d_model: usize, n_heads: usize, n_layers: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 {
            return Err(Error::config("d_model and n_heads must be positive"));
        }
        if d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let dh = d_model / n_heads;
        Ok(AttentionConfig {
            d_model,
            n_heads,
            d_k: dh,
            d_v: dh,
            n_layers,
        })
    }
}

/// Per-head projections and the output projection of one attention op.
#[derive(Debug, Clone)]
pub struct MultiHeadRefs {
    pub wq: Vec<ParamRef>,
    pub wk: Vec<ParamRef>,
    pub wv: Vec<ParamRef>,
    pub wo: ParamRef,
}

impl MultiHeadRefs {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut RngStream,
    ) -> Self {
        let d = cfg.d_model;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..cfg.n_heads {
            wq.push(params.add_affine(format!("{prefix}.h{h}.wq"), &[d, cfg.d_k], d, rng));
            wk.push(params.add_affine(format!("{prefix}.h{h}.wk"), &[d, cfg.d_k], d, rng));
            wv.push(params.add_affine(format!("{prefix}.h{h}.wv"), &[d, cfg.d_v], d, rng));
        }
        let wo = params.add_affine(
            format!("{prefix}.wo"),
            &[cfg.n_heads * cfg.d_v, d],
            cfg.n_heads * cfg.d_v,
            rng,
        );
        MultiHeadRefs { wq, wk, wv, wo }
    }
}

/// One encoder layer: self-attention + residual, then BN -> MLP with a
/// second residual.
#[derive(Debug, Clone)]
pub struct EncoderLayerRefs {
    pub attn: MultiHeadRefs,
    pub bn_gamma: ParamRef,
    pub bn_beta: ParamRef,
    pub mlp_w1: ParamRef,
    pub mlp_b1: ParamRef,
    pub mlp_w2: ParamRef,
    pub mlp_b2: ParamRef,
}

impl EncoderLayerRefs {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut RngStream,
    ) -> Self {
        let d = cfg.d_model;
        let attn = MultiHeadRefs::init(params, &format!("{prefix}.attn"), cfg, rng);
        let bn_gamma = params.add(
            format!("{prefix}.bn.gamma"),
            crate::tensor::Tensor::full(&[d], S::one()),
        );
        let bn_beta = params.add(
            format!("{prefix}.bn.beta"),
            crate::tensor::Tensor::zeros(&[d]),
        );
        EncoderLayerRefs {
            attn,
            bn_gamma,
            bn_beta,
            mlp_w1: params.add_affine(format!("{prefix}.mlp.w1"), &[d, d], d, rng),
            mlp_b1: params.add_affine(format!("{prefix}.mlp.b1"), &[d], d, rng),
            mlp_w2: params.add_affine(format!("{prefix}.mlp.w2"), &[d, d], d, rng),
            mlp_b2: params.add_affine(format!("{prefix}.mlp.b2"), &[d], d, rng),
        }
    }
}

/// One cross-attention layer: queries attend over a context, residual on
/// the query path, then MLP with residual. No BN on this branch.
#[derive(Debug, Clone)]
pub struct CrossLayerRefs {
    pub attn: MultiHeadRefs,
    pub mlp_w1: ParamRef,
    pub mlp_b1: ParamRef,
    pub mlp_w2: ParamRef,
    pub mlp_b2: ParamRef,
}

impl CrossLayerRefs {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut RngStream,
    ) -> Self {
        let d = cfg.d_model;
        let attn = MultiHeadRefs::init(params, &format!("{prefix}.attn"), cfg, rng);
        CrossLayerRefs {
            attn,
            mlp_w1: params.add_affine(format!("{prefix}.mlp.w1"), &[d, d], d, rng),
            mlp_b1: params.add_affine(format!("{prefix}.mlp.b1"), &[d], d, rng),
            mlp_w2: params.add_affine(format!("{prefix}.mlp.w2"), &[d, d], d, rng),
            mlp_b2: params.add_affine(format!("{prefix}.mlp.b2"), &[d], d, rng),
        }
    }
}

fn lift3<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<(VarId, bool)> {
    let shape = g.value(x).shape().to_vec();
    match shape.len() {
        2 => {
            let lifted = g.reshape(x, vec![1, shape[0], shape[1]])?;
            Ok((lifted, true))
        }
        3 => Ok((x, false)),
        _ => Err(Error::dim(format!("expected rank 2 or 3, got {shape:?}"))),
    }
}

/// `softmax(q k^T / sqrt(d_k)) v` with the weights exposed.
///
/// Accepts `[m, d]` (single sample) or `[B, m, d]` inputs; the returned
/// weight var has the matching rank.
pub fn scaled_attention<S: Scalar>(
    g: &mut Graph<S>,
    q: VarId,
    k: VarId,
    v: VarId,
) -> Result<(VarId, VarId)> {
    let d_k = g.value(q).last_dim();
    if d_k == 0 {
        return Err(Error::config("scaled_attention with d_k = 0"));
    }
    let (q3, lifted) = lift3(g, q)?;
    let (k3, _) = lift3(g, k)?;
    let (v3, _) = lift3(g, v)?;
    let kt = g.transpose_last(k3)?;
    let scores = g.bmm(q3, kt)?;
    let scaled = g.scale(scores, S::from_f64(1.0 / (d_k as f64).sqrt()));
    let weights = g.softmax_last(scaled)?;
    let out = g.bmm(weights, v3)?;
    if lifted {
        let oshape = g.value(out).shape()[1..].to_vec();
        let wshape = g.value(weights).shape()[1..].to_vec();
        let out2 = g.reshape(out, oshape)?;
        let w2 = g.reshape(weights, wshape)?;
        Ok((out2, w2))
    } else {
        Ok((out, weights))
    }
}

/// Multi-head attention: per-head projected scaled attention, heads
/// concatenated and projected by `W^O`. Returns the output and one
/// weight var per head.
pub fn multi_head<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[VarId],
    refs: &MultiHeadRefs,
    q_in: VarId,
    k_in: VarId,
    v_in: VarId,
) -> Result<(VarId, Vec<VarId>)> {
    let d = g.value(q_in).last_dim();
    let wo_in = g.value(vars[refs.wo.0]).shape()[0];
    let d_v = g.value(vars[refs.wv[0].0]).shape()[1];
    if refs.wv.len() * d_v != wo_in {
        return Err(Error::config(format!(
            "head width mismatch: {} heads x d_v {} vs W^O input {}",
            refs.wv.len(),
            d_v,
            wo_in
        )));
    }
    if g.value(vars[refs.wq[0].0]).shape()[0] != d {
        return Err(Error::config(format!(
            "input width {} does not match projection rows {}",
            d,
            g.value(vars[refs.wq[0].0]).shape()[0]
        )));
    }
    let mut heads = Vec::with_capacity(refs.wq.len());
    let mut weights = Vec::with_capacity(refs.wq.len());
    for h in 0..refs.wq.len() {
        let qh = g.matmul(q_in, vars[refs.wq[h].0])?;
        let kh = g.matmul(k_in, vars[refs.wk[h].0])?;
        let vh = g.matmul(v_in, vars[refs.wv[h].0])?;
        let (oh, wh) = scaled_attention(g, qh, kh, vh)?;
        heads.push(oh);
        weights.push(wh);
    }
    let cat = g.concat_last(&heads)?;
    let out = g.matmul(cat, vars[refs.wo.0])?;
    Ok((out, weights))
}

fn token_mlp<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[VarId],
    w1: ParamRef,
    b1: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
    x: VarId,
) -> Result<VarId> {
    let h = g.linear(x, vars[w1.0], vars[b1.0])?;
    let h = g.relu(h);
    g.linear(h, vars[w2.0], vars[b2.0])
}

/// Self-attention encoder block:
/// `hat = MHA(x,x,x) + x; out = MLP(BN(hat)) + hat`.
pub fn encoder_block<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[VarId],
    refs: &EncoderLayerRefs,
    tokens: VarId,
    bn_state: &mut NormState<S>,
    mode: BnMode,
) -> Result<VarId> {
    let shape = g.value(tokens).shape().to_vec();
    let (attn_out, _) = multi_head(g, vars, &refs.attn, tokens, tokens, tokens)?;
    let hat = g.add(attn_out, tokens)?;
    let d = shape[shape.len() - 1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(hat, vec![rows, d])?;
    let normed = g.batch_norm(flat, vars[refs.bn_gamma.0], vars[refs.bn_beta.0], bn_state, mode)?;
    let mlp = token_mlp(g, vars, refs.mlp_w1, refs.mlp_b1, refs.mlp_w2, refs.mlp_b2, normed)?;
    let mlp = g.reshape(mlp, shape)?;
    g.add(mlp, hat)
}

/// Cross-attention block:
/// `hat = MHA(q, ctx, ctx) + q; out = MLP(hat) + hat`.
/// Returns per-head attention weight vars (`[.., m_q, m_ctx]`).
pub fn cross_block<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[VarId],
    refs: &CrossLayerRefs,
    queries: VarId,
    context: VarId,
) -> Result<(VarId, Vec<VarId>)> {
    if g.value(context).leading_len() == 0 || g.value(context).is_empty() {
        return Err(Error::dim("cross_block with empty context"));
    }
    let (attn_out, weights) = multi_head(g, vars, &refs.attn, queries, context, context)?;
    let hat = g.add(attn_out, queries)?;
    let mlp = token_mlp(g, vars, refs.mlp_w1, refs.mlp_b1, refs.mlp_w2, refs.mlp_b2, hat)?;
    let out = g.add(mlp, hat)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff_check;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;

    type G = Graph<f64>;
    type T = Tensor<f64>;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> T {
        let n: usize = shape.iter().product();
        T::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut rng = RngStream::new(1);
        let mut g = G::new();
        let q = g.input(rand_tensor(&[3, 4], &mut rng), false);
        let k = g.input(rand_tensor(&[1, 4], &mut rng), false);
        let v = g.input(rand_tensor(&[1, 2], &mut rng), false);
        let (out, w) = scaled_attention(&mut g, q, k, v).unwrap();
        for &wv in g.value(w).data() {
            assert!((wv - 1.0).abs() < 1e-15);
        }
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), g.value(v).row(0));
        }
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let mut rng = RngStream::new(2);
        let mut g = G::new();
        let q = g.input(T::zeros(&[2, 4]), false);
        let k = g.input(rand_tensor(&[5, 4], &mut rng), false);
        let v = g.input(rand_tensor(&[5, 3], &mut rng), false);
        let (_, w) = scaled_attention(&mut g, q, k, v).unwrap();
        for &wv in g.value(w).data() {
            assert!((wv - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut rng = RngStream::new(3);
        let mut g = G::new();
        let q = g.input(rand_tensor(&[2, 6, 4], &mut rng), false);
        let k = g.input(rand_tensor(&[2, 5, 4], &mut rng), false);
        let v = g.input(rand_tensor(&[2, 5, 4], &mut rng), false);
        let (_, w) = scaled_attention(&mut g, q, k, v).unwrap();
        for row in g.value(w).data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_reduces_to_scaled_attention() {
        let mut rng = RngStream::new(4);
        let cfg = AttentionConfig::new(4, 1, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let refs = MultiHeadRefs::init(&mut params, "mh", &cfg, &mut rng);
        let x = rand_tensor(&[1, 3, 4], &mut rng);

        let mut g = G::new();
        let vars = params.register(&mut g, false);
        let xv = g.input(x.clone(), false);
        let (out, _) = multi_head(&mut g, &vars, &refs, xv, xv, xv).unwrap();

        let mut g2 = G::new();
        let vars2 = params.register(&mut g2, false);
        let xv2 = g2.input(x, false);
        let q = g2.matmul(xv2, vars2[refs.wq[0].0]).unwrap();
        let k = g2.matmul(xv2, vars2[refs.wk[0].0]).unwrap();
        let v = g2.matmul(xv2, vars2[refs.wv[0].0]).unwrap();
        let (a, _) = scaled_attention(&mut g2, q, k, v).unwrap();
        let expect = g2.matmul(a, vars2[refs.wo.0]).unwrap();

        for (a, b) in g.value(out).data().iter().zip(g2.value(expect).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_output() {
        let mut rng = RngStream::new(5);
        let cfg = AttentionConfig::new(4, 2, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let refs = MultiHeadRefs::init(&mut params, "mh", &cfg, &mut rng);
        *params.get_mut(refs.wo) = T::zeros(&[4, 4]);
        let mut g = G::new();
        let vars = params.register(&mut g, false);
        let x = g.input(rand_tensor(&[1, 3, 4], &mut rng), false);
        let (out, _) = multi_head(&mut g, &vars, &refs, x, x, x).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multi_head_gradients_match_fd() {
        let mut rng = RngStream::new(6);
        let cfg = AttentionConfig::new(4, 2, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let refs = MultiHeadRefs::init(&mut params, "mh", &cfg, &mut rng);
        let x = rand_tensor(&[1, 3, 4], &mut rng);
        let err = finite_diff_check(
            |g, vars| {
                let xv = g.input(x.clone(), false);
                let (out, _) = multi_head(g, vars, &refs, xv, xv, xv)?;
                let sq = g.square(out);
                Ok(g.sum_all(sq))
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let mut rng = RngStream::new(7);
        let cfg = AttentionConfig::new(4, 2, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = EncoderLayerRefs::init(&mut params, "enc", &cfg, &mut rng);
        let cross = CrossLayerRefs::init(&mut params, "cross", &cfg, &mut rng);
        *params.get_mut(enc.attn.wo) = T::zeros(&[4, 4]);
        *params.get_mut(enc.mlp_w2) = T::zeros(&[4, 4]);
        *params.get_mut(enc.mlp_b2) = T::zeros(&[4]);
        *params.get_mut(cross.attn.wo) = T::zeros(&[4, 4]);
        *params.get_mut(cross.mlp_w2) = T::zeros(&[4, 4]);
        *params.get_mut(cross.mlp_b2) = T::zeros(&[4]);

        let mut g = G::new();
        let vars = params.register(&mut g, false);
        let x = g.input(rand_tensor(&[2, 3, 4], &mut rng), false);
        let mut st = NormState::new(4);
        let out = encoder_block(
            &mut g,
            &vars,
            &enc,
            x,
            &mut st,
            BnMode::Train { update_stats: false },
        )
        .unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ctx = g.input(rand_tensor(&[2, 5, 4], &mut rng), false);
        let (cout, _) = cross_block(&mut g, &vars, &cross, x, ctx).unwrap();
        for (a, b) in g.value(cout).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = RngStream::new(8);
        let cfg = AttentionConfig::new(6, 2, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = EncoderLayerRefs::init(&mut params, "enc", &cfg, &mut rng);
        let x = rand_tensor(&[1, 5, 6], &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp_data = Vec::new();
        for &i in &perm {
            xp_data.extend_from_slice(&x.data()[i * 6..(i + 1) * 6]);
        }
        let xp = T::new(vec![1, 5, 6], xp_data).unwrap();

        let run = |inp: T, params: &ParamSet<f64>| -> T {
            let mut g = G::new();
            let vars = params.register(&mut g, false);
            let xv = g.input(inp, false);
            let mut st = NormState::new(6);
            let out = encoder_block(
                &mut g,
                &vars,
                &enc,
                xv,
                &mut st,
                BnMode::Train { update_stats: false },
            )
            .unwrap();
            g.value(out).clone()
        };
        let y = run(x, &params);
        let yp = run(xp, &params);
        for (j, &i) in perm.iter().enumerate() {
            for d in 0..6 {
                assert!(
                    (yp.data()[j * 6 + d] - y.data()[i * 6 + d]).abs() < 1e-10,
                    "token {i} -> {j}"
                );
            }
        }
    }

    #[test]
    fn single_covariate_context_weights_are_one() {
        let mut rng = RngStream::new(9);
        let cfg = AttentionConfig::new(4, 2, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let cross = CrossLayerRefs::init(&mut params, "cross", &cfg, &mut rng);
        let mut g = G::new();
        let vars = params.register(&mut g, false);
        let q = g.input(rand_tensor(&[1, 2, 4], &mut rng), false);
        let ctx = g.input(rand_tensor(&[1, 1, 4], &mut rng), false);
        let (_, weights) = cross_block(&mut g, &vars, &cross, q, ctx).unwrap();
        for &w in weights.iter() {
            for &v in g.value(w).data() {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn block_gradients_match_fd() {
        let mut rng = RngStream::new(10);
        let cfg = AttentionConfig::new(4, 2, 1).unwrap();
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = EncoderLayerRefs::init(&mut params, "enc", &cfg, &mut rng);
        let cross = CrossLayerRefs::init(&mut params, "cross", &cfg, &mut rng);
        let x = rand_tensor(&[1, 4, 4], &mut rng);
        let ctx = rand_tensor(&[1, 3, 4], &mut rng);
        let err = finite_diff_check(
            |g, vars| {
                let xv = g.input(x.clone(), false);
                let mut st = NormState::new(4);
                let e = encoder_block(
                    g,
                    vars,
                    &enc,
                    xv,
                    &mut st,
                    BnMode::Train { update_stats: false },
                )?;
                let cv = g.input(ctx.clone(), false);
                let (out, _) = cross_block(g, vars, &cross, e, cv)?;
                let sq = g.square(out);
                Ok(g.sum_all(sq))
            },
            &mut params,
            1e-5,
        );
        assert!(err < 1e-5, "err {err}");
    }
}

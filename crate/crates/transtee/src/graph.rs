//! Recorded computation graph with reverse-mode gradients.
//!
//! Define-by-run: every operation appends a node holding the forward
//! value and a closure that maps the output gradient to per-parent
//! gradients. Node order is construction order, which is already
//! topological, so backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

pub type VarId = usize;

type BackFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    parents: Vec<VarId>,
    backward: Option<BackFn<S>>,
    op: &'static str,
}

/// Append-only record of one forward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradient buffers filled by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf that was registered with `requires_grad`;
    /// zero tensor if the root did not depend on it.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Mode switch for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics. `update_stats` controls whether
    /// the running buffers absorb this batch.
    Train { update_stats: bool },
    /// Normalize by running statistics.
    Eval,
}

/// Running statistics of one BatchNorm site.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<S: Scalar> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Scalar> NormState<S> {
    pub fn new(dim: usize) -> Self {
        NormState {
            running_mean: vec![S::zero(); dim],
            running_var: vec![S::one(); dim],
            momentum: S::from_f64(0.1),
            eps: S::from_f64(1e-5),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        parents: Vec<VarId>,
        backward: Option<BackFn<S>>,
        op: &'static str,
    ) -> VarId {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward: if requires_grad { backward } else { None },
            op,
        });
        self.nodes.len() - 1
    }

    /// Register a leaf tensor.
    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: vec![],
            backward: None,
            op: "input",
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.input(value, false)
    }

    // ---- linear algebra --------------------------------------------------

    /// `[.., k] x [k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = tensor::matmul(&av, &bv)?;
        let (m, k) = (av.leading_len(), av.last_dim());
        let n = bv.shape()[1];
        let back: BackFn<S> = Box::new(move |g| {
            let da = tensor::matmul_nt(g.data(), bv.data(), m, k, n);
            let db = tensor::matmul_tn(av.data(), g.data(), m, k, n);
            vec![
                Tensor::new(av.shape().to_vec(), da).unwrap(),
                Tensor::new(bv.shape().to_vec(), db).unwrap(),
            ]
        });
        Ok(self.push(out, vec![a, b], Some(back), "matmul"))
    }

    /// Batched `[B,m,k] x [B,k,n]`.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = tensor::bmm(&av, &bv)?;
        let back: BackFn<S> = Box::new(move |g| {
            let bt = tensor::transpose_last(&bv);
            let at = tensor::transpose_last(&av);
            let da = tensor::bmm(g, &bt).unwrap();
            let db = tensor::bmm(&at, g).unwrap();
            vec![da, db]
        });
        Ok(self.push(out, vec![a, b], Some(back), "bmm"))
    }

    pub fn transpose_last(&mut self, a: VarId) -> Result<VarId> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(Error::dim("transpose_last needs rank >= 2"));
        }
        let out = tensor::transpose_last(av);
        let back: BackFn<S> = Box::new(move |g| vec![tensor::transpose_last(g)]);
        Ok(self.push(out, vec![a], Some(back), "transpose"))
    }

    /// `a w + b` with the bias broadcast over rows.
    pub fn linear(&mut self, a: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let prod = self.matmul(a, w)?;
        self.add(prod, b)
    }

    // ---- softmax / normalization ----------------------------------------

    pub fn softmax_last(&mut self, a: VarId) -> Result<VarId> {
        let out = tensor::softmax_last(self.value(a))?;
        let y = out.clone();
        let n = y.last_dim();
        let back: BackFn<S> = Box::new(move |g| {
            let mut dx = vec![S::zero(); y.len()];
            for (row, (yrow, grow)) in dx
                .chunks_mut(n)
                .zip(y.data().chunks(n).zip(g.data().chunks(n)))
            {
                let dot: S = yrow.iter().zip(grow.iter()).map(|(&yv, &gv)| yv * gv).sum();
                for ((d, &yv), &gv) in row.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Tensor::new(y.shape().to_vec(), dx).unwrap()]
        });
        Ok(self.push(out, vec![a], Some(back), "softmax"))
    }

    /// BatchNorm over features of `[N, d]`; `gamma`/`beta` are `[d]`.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        state: &mut NormState<S>,
        mode: BnMode,
    ) -> Result<VarId> {
        let xv = self.value(x).clone();
        if xv.rank() != 2 {
            return Err(Error::dim(format!(
                "batch_norm expects [batch, d], got {:?}",
                xv.shape()
            )));
        }
        let (nrows, d) = (xv.shape()[0], xv.shape()[1]);
        if d != state.running_mean.len() {
            return Err(Error::dim(format!(
                "batch_norm state dim {} vs input dim {}",
                state.running_mean.len(),
                d
            )));
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("batch_norm scale/shift must have feature width"));
        }

        let (mean, var): (Vec<S>, Vec<S>) = match mode {
            BnMode::Train { .. } => {
                if nrows < 2 {
                    return Err(Error::contract(format!(
                        "batch_norm train mode needs batch >= 2, got {nrows}"
                    )));
                }
                let nf = S::from_f64(nrows as f64);
                let mut mean = vec![S::zero(); d];
                for row in xv.data().chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row.iter()) {
                        *m = *m + v;
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / nf;
                }
                let mut var = vec![S::zero(); d];
                for row in xv.data().chunks(d) {
                    for ((vv, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                        let c = v - m;
                        *vv = *vv + c * c;
                    }
                }
                for vv in var.iter_mut() {
                    *vv = *vv / nf;
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };

        if let BnMode::Train { update_stats: true } = mode {
            let m = state.momentum;
            for j in 0..d {
                state.running_mean[j] = (S::one() - m) * state.running_mean[j] + m * mean[j];
                state.running_var[j] = (S::one() - m) * state.running_var[j] + m * var[j];
            }
        }

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        for (hrow, row) in xhat.chunks_mut(d).zip(xv.data().chunks(d)) {
            for j in 0..d {
                hrow[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = vec![S::zero(); xv.len()];
        for (orow, hrow) in out.chunks_mut(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                orow[j] = gv.data()[j] * hrow[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;

        let batch_coupled = matches!(mode, BnMode::Train { .. });
        let gshape = gv.shape().to_vec();
        let xshape = xv.shape().to_vec();
        let back: BackFn<S> = Box::new(move |g| {
            let nf = S::from_f64(nrows as f64);
            let mut dbeta = vec![S::zero(); d];
            let mut dgamma = vec![S::zero(); d];
            for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                for j in 0..d {
                    dbeta[j] = dbeta[j] + grow[j];
                    dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                }
            }
            let mut dx = vec![S::zero(); nrows * d];
            if batch_coupled {
                for ((xrow, grow), hrow) in dx
                    .chunks_mut(d)
                    .zip(g.data().chunks(d))
                    .zip(xhat.chunks(d))
                {
                    for j in 0..d {
                        xrow[j] = gv.data()[j]
                            * inv_std[j]
                            * (grow[j] - dbeta[j] / nf - hrow[j] * dgamma[j] / nf);
                    }
                }
            } else {
                for (xrow, grow) in dx.chunks_mut(d).zip(g.data().chunks(d)) {
                    for j in 0..d {
                        xrow[j] = gv.data()[j] * inv_std[j] * grow[j];
                    }
                }
            }
            vec![
                Tensor::new(xshape.clone(), dx).unwrap(),
                Tensor::new(gshape.clone(), dgamma).unwrap(),
                Tensor::new(gshape.clone(), dbeta).unwrap(),
            ]
        });
        Ok(self.push(out, vec![x, gamma, beta], Some(back), "batch_norm"))
    }

    // ---- elementwise -----------------------------------------------------

    fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
        b.len() <= a.len() && a[a.len() - b.len()..] == *b
    }

    fn binary(
        &mut self,
        a: VarId,
        b: VarId,
        op: &'static str,
        fwd: impl Fn(S, S) -> S,
        // gradients (da, db) given (a, b, g)
        back_fn: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<VarId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if !Self::broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} are not broadcast-compatible",
                av.shape(),
                bv.shape()
            )));
        }
        let bn = bv.len().max(1);
        let mut out = vec![S::zero(); av.len()];
        for (i, o) in out.iter_mut().enumerate() {
            *o = fwd(av.data()[i], bv.data()[i % bn]);
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let back: BackFn<S> = Box::new(move |g| {
            let mut da = vec![S::zero(); av.len()];
            let mut db = vec![S::zero(); bv.len()];
            for i in 0..av.len() {
                let (ga, gb) = back_fn(av.data()[i], bv.data()[i % bn], g.data()[i]);
                da[i] = ga;
                db[i % bn] = db[i % bn] + gb;
            }
            vec![
                Tensor::new(av.shape().to_vec(), da).unwrap(),
                Tensor::new(bv.shape().to_vec(), db).unwrap(),
            ]
        });
        Ok(self.push(out, vec![a, b], Some(back), op))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(
            a,
            b,
            "div",
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    fn unary(
        &mut self,
        a: VarId,
        op: &'static str,
        fwd: impl Fn(S) -> S,
        dfdx: impl Fn(S) -> S + 'static,
    ) -> VarId {
        let av = self.value(a).clone();
        let out = av.map(&fwd);
        let back: BackFn<S> = Box::new(move |g| {
            let mut dx = vec![S::zero(); av.len()];
            for i in 0..av.len() {
                dx[i] = g.data()[i] * dfdx(av.data()[i]);
            }
            vec![Tensor::new(av.shape().to_vec(), dx).unwrap()]
        });
        self.push(out, vec![a], Some(back), op)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(
            a,
            "relu",
            |x| if x > S::zero() { x } else { S::zero() },
            |x| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(a, "exp", |x| x.exp(), |x| x.exp())
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        if self.value(a).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::numeric("log of nonpositive value"));
        }
        Ok(self.unary(a, "log", |x| x.ln(), |x| S::one() / x))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(a, "square", |x| x * x, |x| S::from_f64(2.0) * x)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.unary(a, "neg", |x| -x, |_| -S::one())
    }

    pub fn scale(&mut self, a: VarId, k: S) -> VarId {
        self.unary(a, "scale", move |x| x * k, move |_| k)
    }

    pub fn add_const(&mut self, a: VarId, k: S) -> VarId {
        self.unary(a, "add_const", move |x| x + k, |_| S::one())
    }

    // ---- reductions / reshaping -----------------------------------------

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let s: S = av.data().iter().cloned().sum();
        let back: BackFn<S> = Box::new(move |g| {
            vec![Tensor::full(av.shape(), g.scalar_value())]
        });
        self.push(Tensor::scalar(s), vec![a], Some(back), "sum")
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.sum_all(a);
        Ok(self.scale(s, S::from_f64(1.0 / n as f64)))
    }

    /// Mean over one axis; output drops that axis.
    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let av = self.value(a).clone();
        if axis >= av.rank() {
            return Err(Error::dim(format!(
                "mean_axis {} out of range for shape {:?}",
                axis,
                av.shape()
            )));
        }
        let n = av.shape()[axis];
        if n == 0 {
            return Err(Error::dim("mean over empty axis"));
        }
        let lead: usize = av.shape()[..axis].iter().product();
        let trail: usize = av.shape()[axis + 1..].iter().product();
        let nf = S::from_f64(n as f64);
        let mut out = vec![S::zero(); lead * trail];
        for l in 0..lead {
            for i in 0..n {
                let base = (l * n + i) * trail;
                for t in 0..trail {
                    out[l * trail + t] = out[l * trail + t] + av.data()[base + t];
                }
            }
        }
        for o in out.iter_mut() {
            *o = *o / nf;
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        let in_shape = av.shape().to_vec();
        let back: BackFn<S> = Box::new(move |g| {
            let mut dx = vec![S::zero(); lead * n * trail];
            for l in 0..lead {
                for i in 0..n {
                    let base = (l * n + i) * trail;
                    for t in 0..trail {
                        dx[base + t] = g.data()[l * trail + t] / nf;
                    }
                }
            }
            vec![Tensor::new(in_shape.clone(), dx).unwrap()]
        });
        Ok(self.push(out, vec![a], Some(back), "mean_axis"))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let av = self.value(a);
        let out = av.reshaped(shape)?;
        let in_shape = av.shape().to_vec();
        let back: BackFn<S> =
            Box::new(move |g| vec![g.reshaped(in_shape.clone()).unwrap()]);
        Ok(self.push(out, vec![a], Some(back), "reshape"))
    }

    /// Concatenate along the last axis; all inputs share leading shape.
    pub fn concat_last(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.value(parts[0]).clone();
        let lead_shape = &first.shape()[..first.rank() - 1];
        let rows = first.leading_len();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if &t.shape()[..t.rank() - 1] != lead_shape {
                return Err(Error::dim(format!(
                    "concat_last leading shapes differ: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let t = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead_shape.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        let widths_c = widths.clone();
        let lead_shape_c = lead_shape.to_vec();
        let back: BackFn<S> = Box::new(move |g| {
            let mut grads = Vec::with_capacity(widths_c.len());
            let mut off = 0;
            for &w in &widths_c {
                let mut dx = vec![S::zero(); rows * w];
                for r in 0..rows {
                    dx[r * w..(r + 1) * w]
                        .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                }
                let mut shape = lead_shape_c.clone();
                shape.push(w);
                grads.push(Tensor::new(shape, dx).unwrap());
                off += w;
            }
            grads
        });
        Ok(self.push(out, parts.to_vec(), Some(back), "concat"))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let av = self.value(a).clone();
        let w = av.last_dim();
        if start + len > w {
            return Err(Error::dim(format!(
                "slice {}..{} exceeds last dim {}",
                start,
                start + len,
                w
            )));
        }
        let rows = av.leading_len();
        let mut out = vec![S::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&av.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, out)?;
        let in_shape = av.shape().to_vec();
        let back: BackFn<S> = Box::new(move |g| {
            let mut dx = vec![S::zero(); rows * w];
            for r in 0..rows {
                dx[r * w + start..r * w + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Tensor::new(in_shape.clone(), dx).unwrap()]
        });
        Ok(self.push(out, vec![a], Some(back), "slice"))
    }

    /// Per-token scalar embedding: `x [B,p]` (plain data), `w`,`b`
    /// `[p,d]` -> `[B,p,d]` with row `(bi,i) = x[bi,i] * w[i] + b[i]`.
    pub fn embed_tokens(&mut self, x: &Tensor<S>, w: VarId, b: VarId) -> Result<VarId> {
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        if x.rank() != 2 || wv.rank() != 2 || wv.shape() != bv.shape() {
            return Err(Error::dim("embed_tokens expects x [B,p], w,b [p,d]"));
        }
        let (bs, p) = (x.shape()[0], x.shape()[1]);
        if wv.shape()[0] != p {
            return Err(Error::dim(format!(
                "embed_tokens: {} tokens vs {} embedding rows",
                p,
                wv.shape()[0]
            )));
        }
        let d = wv.shape()[1];
        let mut out = vec![S::zero(); bs * p * d];
        for bi in 0..bs {
            for i in 0..p {
                let xv = x.data()[bi * p + i];
                let base = (bi * p + i) * d;
                for j in 0..d {
                    out[base + j] = xv * wv.data()[i * d + j] + bv.data()[i * d + j];
                }
            }
        }
        let out = Tensor::new(vec![bs, p, d], out)?;
        let xv = x.clone();
        let back: BackFn<S> = Box::new(move |g| {
            let mut dw = vec![S::zero(); p * d];
            let mut db = vec![S::zero(); p * d];
            for bi in 0..bs {
                for i in 0..p {
                    let s = xv.data()[bi * p + i];
                    let base = (bi * p + i) * d;
                    for j in 0..d {
                        dw[i * d + j] = dw[i * d + j] + s * g.data()[base + j];
                        db[i * d + j] = db[i * d + j] + g.data()[base + j];
                    }
                }
            }
            vec![
                Tensor::new(vec![p, d], dw).unwrap(),
                Tensor::new(vec![p, d], db).unwrap(),
            ]
        });
        Ok(self.push(out, vec![w, b], Some(back), "embed_tokens"))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar root. Fills gradient buffers for
    /// every reachable node whose subtree requires gradients.
    pub fn backward(&self, root: VarId) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(rv.shape(), S::one()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].as_ref() else { continue };
            let Some(back) = node.backward.as_ref() else { continue };
            let parent_grads = back(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads.into_iter()) {
                if !self.nodes[pid].requires_grad {
                    continue;
                }
                if !pg.all_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite gradient flowing into node {pid} from {} (node {id})",
                        node.op
                    )));
                }
                match grads[pid].as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + b;
                        }
                    }
                    None => grads[pid] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;
    type T = Tensor<f64>;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = G::new();
        let x = g.input(T::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]), true);
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_square_is_2x() {
        let mut g = G::new();
        let x = g.input(T::vector(vec![1.0, -2.0, 0.5]), true);
        let sq = g.square(x);
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = G::new();
        let x = g.input(T::vector(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn relu_and_identities() {
        let mut g = G::new();
        let x = g.input(T::vector(vec![-1.0, 0.0, 2.0]), false);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let zero = g.constant(T::vector(vec![0.0, 0.0, 0.0]));
        let s = g.add(x, zero).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut g = G::new();
        let x = g.input(T::vector(vec![0.5, 1.0, 3.25]), false);
        let l = g.log(x).unwrap();
        let e = g.exp(l);
        for (&a, &b) in g.value(e).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = g.input(T::vector(vec![-1.0]), false);
        assert!(g.log(bad).is_err());
    }

    #[test]
    fn linear_identity_and_scalar_affine() {
        let mut g = G::new();
        let a = g.input(T::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
        let w = g.input(T::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
        let b = g.input(T::vector(vec![0.0, 0.0]), false);
        let y = g.linear(a, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());

        let a = g.input(T::from_rows(&[vec![2.0]]), false);
        let w = g.input(T::from_rows(&[vec![3.0]]), false);
        let b = g.input(T::vector(vec![1.0]), false);
        let y = g.linear(a, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = G::new();
        let one = g.input(T::from_rows(&[vec![5.0, -1.0]]), false);
        let m = g.mean_axis(one, 0).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, -1.0]);

        let two = g.input(T::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]), false);
        let m = g.mean_axis(two, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 2.0]);
    }

    #[test]
    fn batch_norm_constant_column_yields_shift() {
        let mut g = G::new();
        let x = g.input(
            T::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 3.0]]),
            false,
        );
        let gamma = g.input(T::vector(vec![2.0, 2.0]), false);
        let beta = g.input(T::vector(vec![0.7, -0.3]), false);
        let mut st = NormState::new(2);
        let y = g
            .batch_norm(x, gamma, beta, &mut st, BnMode::Train { update_stats: true })
            .unwrap();
        for r in 0..3 {
            assert!((g.value(y).row(r)[0] - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_already_normalized_is_identity() {
        // batch mean 0 variance 1 per feature
        let mut g = G::new();
        let x = g.input(T::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]), false);
        let gamma = g.input(T::vector(vec![1.0, 1.0]), false);
        let beta = g.input(T::vector(vec![0.0, 0.0]), false);
        let mut st = NormState::new(2);
        let y = g
            .batch_norm(x, gamma, beta, &mut st, BnMode::Train { update_stats: false })
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_rejects_batch_of_one() {
        let mut g = G::new();
        let x = g.input(T::from_rows(&[vec![1.0]]), false);
        let gamma = g.input(T::vector(vec![1.0]), false);
        let beta = g.input(T::vector(vec![0.0]), false);
        let mut st = NormState::new(1);
        assert!(g
            .batch_norm(x, gamma, beta, &mut st, BnMode::Train { update_stats: true })
            .is_err());
    }

    #[test]
    fn batch_norm_normalizes_random_batch() {
        use crate::rng::RngStream;
        let mut r = RngStream::new(5);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| r.normal(2.0, 3.0)).collect())
            .collect();
        let mut g = G::new();
        let x = g.input(T::from_rows(&rows), false);
        let gamma = g.input(T::vector(vec![1.0; 4]), false);
        let beta = g.input(T::vector(vec![0.0; 4]), false);
        let mut st = NormState::new(4);
        let y = g
            .batch_norm(x, gamma, beta, &mut st, BnMode::Train { update_stats: true })
            .unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..8).map(|i| g.value(y).row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = G::new();
        let a = g.input(T::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
        let b = g.input(T::from_rows(&[vec![5.0], vec![6.0]]), false);
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice_last(c, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);
    }
}

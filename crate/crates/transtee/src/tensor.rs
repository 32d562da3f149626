//! Dense row-major tensors and the raw math kernels behind the
//! recorded operations in [`crate::graph`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
///
/// A rank-0 tensor (empty shape, one element) is the scalar case used
/// for loss values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Last-axis width; 0 for rank-0.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Product of all dims except the last. 1 for rank-0/rank-1.
    pub fn leading_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }
}

// ---- raw kernels ---------------------------------------------------------
//
// These operate on value tensors only; the graph layer wraps them with
// backward closures. Kept as free functions so eval-mode fast paths and
// test oracles can call them directly.

/// `a [m,k] x b [k,n] -> [m,n]`. `a` may have extra leading dims, which
/// are flattened into the row dimension.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if b.rank() != 2 || a.rank() < 2 {
        return Err(Error::dim(format!(
            "matmul expects [..,k] x [k,n], got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.last_dim();
    let (bk, n) = (b.shape()[0], b.shape()[1]);
    if k != bk {
        return Err(Error::dim(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.leading_len();
    let mut out = vec![S::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// `out += a x b` with `a` row-major `[m,k]`, `b` `[k,n]`. ikj ordering.
pub fn matmul_acc_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = S::zero());
    matmul_acc_into(a, b, out, m, k, n);
}

/// `aT x b` with `a` `[k,m]` interpreted transposed: result `[m? ...]`.
/// Concretely computes `a^T b` for `a [m,k_rows]`... we instead provide
/// the two transposed products the backward passes need.
///
/// `a [m,k] , g [m,n] -> a^T g [k,n]`.
pub fn matmul_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

/// `g [m,n] , b [k,n] -> g b^T [m,k]`.
pub fn matmul_nt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                acc = acc + gv * bv;
            }
            orow[p] = acc;
        }
    }
    out
}

/// Batched `a [B,m,k] x b [B,k,n] -> [B,m,n]`.
pub fn bmm<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]
    {
        return Err(Error::dim(format!(
            "bmm expects [B,m,k] x [B,k,n], got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut out = vec![S::zero(); bs * m * n];
    for bi in 0..bs {
        matmul_acc_into(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(vec![bs, m, n], out)
}

/// Swap the last two axes of a rank>=2 tensor.
pub fn transpose_last<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let r = a.rank();
    assert!(r >= 2);
    let m = a.shape()[r - 2];
    let n = a.shape()[r - 1];
    let lead: usize = a.shape()[..r - 2].iter().product();
    let mut out = vec![S::zero(); a.len()];
    for l in 0..lead {
        let src = &a.data()[l * m * n..(l + 1) * m * n];
        let dst = &mut out[l * m * n..(l + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).unwrap()
}

/// Row-stabilized softmax over the last axis.
pub fn softmax_last<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("softmax input contains NaN"));
    }
    let n = a.last_dim();
    if n == 0 {
        return Err(Error::dim("softmax over empty axis"));
    }
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

//! Named parameter storage shared by the model, the optimizer, and the
//! checkpoint format.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one tensor inside a [`ParamSet`]. Indices are stable:
/// parameters are never removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamRef {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamRef(self.entries.len() - 1)
    }

    /// Affine-map weight init: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn add_affine(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RngStream,
    ) -> ParamRef {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64(rng.uniform_in(-bound, bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: ParamRef) -> &Tensor<S> {
        &self.entries[r.0].1
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor<S> {
        &mut self.entries[r.0].1
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.entries[r.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Register every parameter as a graph leaf. Index `i` of the
    /// returned vector is the var for `ParamRef(i)`.
    pub fn register(&self, g: &mut Graph<S>, requires_grad: bool) -> Vec<VarId> {
        self.entries
            .iter()
            .map(|(_, t)| g.input(t.clone(), requires_grad))
            .collect()
    }

    /// Collect gradients for every parameter (zeros where the root did
    /// not depend on a parameter).
    pub fn collect_grads(
        &self,
        grads: &crate::graph::Gradients<S>,
        vars: &[VarId],
    ) -> Vec<Tensor<S>> {
        self.entries
            .iter()
            .zip(vars.iter())
            .map(|((_, t), &v)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}

// ---- bit-exact text serialization ----------------------------------------

pub fn tensor_to_line<S: Scalar>(name: &str, t: &Tensor<S>) -> String {
    let mut s = format!("param {} {}", name, t.rank());
    for d in t.shape() {
        s.push_str(&format!(" {d}"));
    }
    s.push('\n');
    let mut first = true;
    for v in t.data() {
        if !first {
            s.push(' ');
        }
        s.push_str(&format!("{:016x}", v.to_f64_lossy().to_bits()));
        first = false;
    }
    s.push('\n');
    s
}

pub fn parse_hex_values<S: Scalar>(line: &str, expected: usize, lineno: usize) -> Result<Vec<S>> {
    let vals: Result<Vec<S>> = line
        .split_whitespace()
        .map(|tok| {
            u64::from_str_radix(tok, 16)
                .map(|bits| S::from_f64(f64::from_bits(bits)))
                .map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad hex value '{tok}'"),
                })
        })
        .collect();
    let vals = vals?;
    if vals.len() != expected {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {} values, got {}", expected, vals.len()),
        });
    }
    Ok(vals)
}

//! TransTEE: transformer-based treatment effect estimation with
//! adversarial propensity regularization, plus the semi-synthetic
//! benchmark generators, evaluation metrics, and reference baselines.

pub mod attention;
pub mod baselines;
pub mod check;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

/// Concrete f64 aliases used by everything above the tensor core.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type NormState = graph::NormState<f64>;

//! Supernet-based search over per-layer adaptation choices for few-shot
//! learning.
//!
//! A pre-trained dense chain is wrapped in a weight-sharing [`supernet`]
//! where every layer may keep its frozen weights, swap in a fine-tuned
//! copy, attach an adapter, or both. The [`search`] module trains that
//! supernet on random single paths, runs an evolutionary search for a
//! small set of diverse, high-scoring paths, and at meta-test time picks
//! one of them per episode by support-set loss. [`harness`] ties the stages
//! into reproducible experiments.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases at the crate root fix it to `f64`, which is what the experiment
//! pipeline uses.

pub mod episodes;
pub mod error;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use supernet::{AdapterKind, LayerDecision, PathEncoding};

pub type Tensor = tensor::Tensor<f64>;
pub type ParamBlock = grad::ParamBlock<f64>;
pub type Tape = grad::Tape<f64>;
pub type Backbone = supernet::Backbone<f64>;
pub type Supernet = supernet::Supernet<f64>;
pub type AdaptableParams = supernet::AdaptableParams<f64>;
pub type Domain = episodes::Domain<f64>;
pub type Episode = episodes::Episode<f64>;
pub type Benchmark = episodes::Benchmark<f64>;
pub type CentroidSet = metrics::CentroidSet<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Supernet32 = supernet::Supernet<f32>;
pub type Episode32 = episodes::Episode<f32>;

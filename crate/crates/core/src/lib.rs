//! Toy-scale joint audio-video generation with rectified flow.
//!
//! The engine is generic over its scalar: `f64` and `f32` run the full
//! network through the reverse-mode [`tape`], while exact rationals
//! ([`scalar::Exact`]) drive the path construction and Euler sampler where
//! results must be bit-exact. The aliases below fix the common choices.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod preference;
pub mod rope;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod toyworld;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ExactTensor = tensor::Tensor<scalar::Exact>;
pub type Graph64 = tape::Graph<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type JointLatent64 = flow::JointLatent<f64>;
pub type ExactLatent = flow::JointLatent<scalar::Exact>;
pub type PreferencePair64 = preference::PreferencePair<f64>;

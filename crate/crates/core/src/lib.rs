//! Desk-scale simulator for federated face recognition with a shared global
//! embedding and per-client personalized branches.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the pipeline to 64-bit floats, which the gradient checks need.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used by the training pipeline.
pub type Real = f64;

pub type Mat = tensor::Matrix<Real>;
pub type Backbone = model::BackboneParams<Real>;
pub type Proxies = model::ClassEmbeddings<Real>;
pub type Dfc = model::DfcBranch<Real>;

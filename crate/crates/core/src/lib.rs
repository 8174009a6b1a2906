//! Slot attention with a spatial locality prior.
//!
//! The crate bundles a small define-by-run autodiff engine, the slot
//! attention model with its spatial bias solver, an image encoder and
//! mixture decoder, a procedural sprite dataset, and segmentation metrics.
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the default double-precision instantiation.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod perception;
pub mod scalar;
pub mod scenegen;
pub mod slot_attention;
pub mod slp;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;

//! Recurrent all-pairs optical flow with mixture-of-Laplace uncertainty,
//! trained on synthetic scenes at desk scale.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common entry points.

// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corr;
pub mod datagen;
pub mod error;
pub mod flow;
pub mod flowio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensorops;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensorops::Tensor4<f32>;
pub type Tensor64 = tensorops::Tensor4<f64>;
pub type Flow = flow::FlowField<f32>;
pub type Flow64 = flow::FlowField<f64>;
pub type Model = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;

//! Geometry-aware variational autoencoder with a learned Riemannian latent metric.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dynamics;
pub mod error;
pub mod evalaug;
pub mod generate;
pub mod geometry;
pub mod metric;
pub mod model;
pub mod numcore;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double precision is the default throughout.
pub type Tensor = numcore::Tensor<f64>;
pub type Model = model::RhvaeModel<f64>;
pub type Field = metric::MetricField<f64>;
pub type Curve = geometry::DiscreteCurve<f64>;

pub type Tensor32 = numcore::Tensor<f32>;
pub type Model32 = model::RhvaeModel<f32>;
pub type Field32 = metric::MetricField<f32>;
pub type Curve32 = geometry::DiscreteCurve<f32>;

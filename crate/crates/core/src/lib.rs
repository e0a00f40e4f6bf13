//! Weighted batch normalization for domain generalization.
//!
//! A classifier keeps one set of normalization statistics per source domain and, for
//! every sample, blends the per-domain normalizations with weights produced by a small
//! lateral branch. At test time the branch decides how much each source domain's
//! statistics apply to an unseen sample; without domain labels the same machinery
//! discovers latent domains from the branch's soft assignments.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Aliases such as
//! [`Model64`] pin the common choices.

// NaN must fail validation, so checks are written as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod branch;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod linear;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use model::{build_model, EvalWeights, ForwardOptions, Model, ModelConfig, NormMode, Phase};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type NormStats64 = norm::NormStats<f64>;
pub type NormStats32 = norm::NormStats<f32>;

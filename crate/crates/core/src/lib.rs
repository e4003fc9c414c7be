//! Probabilistic forecasting with a recurrent Gaussian base model and a
//! learned correlation structure over short mini-batch windows.
//!
//! The linear algebra, correlation model, and likelihood gradients are generic
//! over [`Scalar`] (`f32` or `f64`); the network, training, and forecasting
//! layers work in `f64`. The aliases below name the `f64` instantiations.

// `!(x > 0)` comparisons are kept on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod corrmodel;
pub mod data;
pub mod error;
pub mod forecast;
pub mod gradengine;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod params;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SymMatrix = linalg::SymMatrix<f64>;
pub type CholFactor = linalg::CholFactor<f64>;
pub type KernelBank = corrmodel::KernelBank<f64>;
pub type MixWeights = corrmodel::MixWeights<f64>;
pub type CorrelationMix = corrmodel::CorrelationMix<f64>;
pub type ConditionalGaussian = corrmodel::ConditionalGaussian<f64>;
pub type GlsPartials = gradengine::GlsPartials<f64>;
pub type IidPartials = gradengine::IidPartials<f64>;

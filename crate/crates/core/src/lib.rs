//! Incremental CTR training with a feature-level CTR prior and an
//! output-space model prior.

pub mod checkpoint;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod feature_prior;
pub mod harness;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod model_prior;
pub mod nn_core;
pub mod optim;
pub mod stream;

#[cfg(all(test, feature = "f32"))]
compile_error!("the unit tests assume 64-bit reals; run them without the `f32` feature");

pub use error::{DdpError, Result};
pub use nn_core::Real;

//! Hierarchical spatial-temporal transformer (HSTTN) for long-term wind
//! power forecasting, built on a small reverse-mode autodiff core.

pub mod autodiff;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;

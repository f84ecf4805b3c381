//! The HSTTN architecture and its parameter files.

pub mod codec;
mod config;
mod hourglass;
pub mod layers;
mod params;

pub use config::{parse_factors, parse_kv, ModelConfig, Variant};
pub use hourglass::{make_variant, ForwardOutput, Hsttn, ScaleTrace};
pub use layers::Streams;
pub use params::{BoundParams, ModelParameters};

pub(crate) use config::{kv_parse, kv_parse_or};

//! Network construction: parameter storage and the U-Net model family.

mod model;
mod params;

pub use model::{build_model, Forward, Model, ModelConfig, ShapePlan, Variant};
pub use params::{he_normal, BoundParams, ParamStore, Parameter};

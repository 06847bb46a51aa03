//! NeXtVLAD video classifiers, mixtures of models with online knowledge
//! distillation, and a three-phase temporal concept localization pipeline
//! evaluated with MAP@K.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod localization;
pub mod mixture;
pub mod model;
pub mod nextvlad;
pub mod numerics;
pub mod params;
pub mod trainer;
mod wire;

pub use error::{Error, Result};
pub use wire::write_atomic;

//! Deterministic simulator of multi-center federated lesion segmentation.
//!
//! Synthetic centers ([`synth`]) train a small convolutional segmenter
//! ([`model`], [`trainer`]) on their own studies; a server fuses the local
//! models under one of five aggregation rules ([`aggregation`]); the fused
//! model is scored per patient ([`metrics`]) and models are ranked by their
//! mean clipped relative error ([`ranking`]). [`orchestrator`] ties the round
//! loop, the centralized baseline and report output together.

pub mod aggregation;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod ranking;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParameterSet;

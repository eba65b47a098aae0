//! Spatial graph forecasting with GraphMAGE layers.

pub mod calibration;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod geo;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ClassWeights, Tape, Tensor, Var};

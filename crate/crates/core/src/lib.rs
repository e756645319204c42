//! Time-domain single-channel source separation with a multi-scale,
//! chunked transformer separator.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod blocks;
pub mod chunking;
pub mod config;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod model;
pub mod objective;
pub mod params;
pub mod scalar;
pub mod signals;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testing;

pub use config::{Preset, RunConfig, SeparatorConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Separator;
pub use scalar::Scalar;
pub use signals::{MixtureExample, Waveform};
pub use tensor::Tensor;
pub use trainer::{Checkpoint, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Separator32 = Separator<f32>;
pub type Separator64 = Separator<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;

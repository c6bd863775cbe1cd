//! Generative augmentation and iterative pseudo-labeling for small image sets.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod rng;
pub mod scalar;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type ModelHandle32 = train::ModelHandle<f32>;
pub type ModelHandle64 = train::ModelHandle<f64>;
pub type GeneratorBundle32 = generator::GeneratorBundle<f32>;
pub type GeneratorBundle64 = generator::GeneratorBundle<f64>;
pub type UnetTrainer32 = ssl::UnetTrainer<f32>;
pub type UnetTrainer64 = ssl::UnetTrainer<f64>;

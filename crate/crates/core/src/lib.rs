//! Input adapters for frozen image classifiers.
//!
//! A stack of identity-initialized 1×1 convolutions is trained in front of a
//! frozen classifier so that images from a new camera are mapped back to the
//! distribution the classifier was trained on.

pub mod autodiff;
pub mod bench;
pub mod cifar;
pub mod colorsim;
pub mod config;
pub mod data;
mod error;
pub mod experiment;
pub mod models;
pub mod persist;
mod scalar;
pub mod synth;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;

//! Acoustic scene classification with a convolutional-recurrent network and
//! spatio-temporal attention pooling.

pub mod error;
pub mod scalar;
pub mod dsp;
pub mod tensor;
pub mod label;
pub mod layers;
pub mod attention;
pub mod model;
pub mod augment;
pub mod train;
pub mod calibrate;
pub mod infer;
pub mod data;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use label::LabelDistribution;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;

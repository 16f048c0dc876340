//! Scene parsing with hybrid convolutional / deconvolutional networks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root pin it to `f64`, which is what training and the command-line tool use.

pub mod cnn;
pub mod data;
pub mod deconv;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod multipatch;
pub mod network;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type FilterBank = deconv::FilterBank<f64>;
pub type LayerState = deconv::LayerState<f64>;
pub type Network = network::Network;

//! Superpixel-sampled semantic segmentation.
//!
//! A small convolutional backbone and a four-branch pyramid module produce
//! feature maps; a handful of pixels per image, drawn from SLIC superpixels,
//! are described by hypercolumns gathered across those maps and classified by
//! a residual or fully-convolutional head. Dense label maps are rebuilt by
//! giving every pixel its superpixel's predicted class. Per-layer learning
//! rates of the head are tuned with control charts over gradient statistics.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the element type to `f64`, which is what the
//! pipeline and command-line tool use.

pub mod config;
pub mod data;
pub mod error;
pub mod head;
pub mod hypercolumn;
mod scalar;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod spc;
pub mod superpixel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type ConvLayer = tensor::ConvLayer<f64>;
pub type FeatureNet = hypercolumn::FeatureNet<f64>;
pub type SegHead = head::SegHead<f64>;
pub type Model = trainer::Model<f64>;
pub type Trainer = trainer::Trainer<f64>;

//! QKVAE: a Transformer variational autoencoder whose decoder takes attention
//! keys from a syntactic latent variable and attention values from a bank of
//! semantic latent variables.

pub mod data;
pub mod eval;
pub mod latent;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;

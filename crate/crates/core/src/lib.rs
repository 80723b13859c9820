//! Sample-specific dynamic filter generation for convolutional networks.
//!
//! An autoencoder supplies per-sample feature maps; small reduction networks
//! collapse them to vectors; an affine map turns each vector into
//! coefficients that linearly combine the base filters of a trainable
//! repository. The combined filters are then used, per sample, by the
//! convolution layers of a prediction network. Everything is trained jointly
//! through the reverse-mode engine in [`autograd`].

pub mod autograd;
pub mod data;
pub mod error;
pub mod exec;
pub mod filtergen;
pub mod models;
pub mod nn;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

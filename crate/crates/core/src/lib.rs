//! Privacy-preserving image classification with block-wise scrambled images
//! and a ConvMixer carrying a trainable token-permutation matrix.
//!
//! * [`keystream`]: SplitMix64 subkeys, permutations and masks.
//! * [`blockcipher`]: the block-wise image cipher and its per-block affine form.
//! * [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`convmixer`]: the model, its penalty loss, training and evaluation.
//! * [`parambudget`]: closed-form parameter counts and the image-size sweep.
//! * [`dataset`]: manifests, CIFAR-10 binary archives, batching.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the 64-bit variants used by the CLI and the test suites.

pub mod blockcipher;
pub mod convmixer;
pub mod dataset;
pub mod error;
pub mod image;
pub mod keystream;
pub mod parambudget;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Model64 = convmixer::Model<f64>;
pub type Model32 = convmixer::Model<f32>;

//! Spacing-adaptive network building blocks.
//!
//! * [`geometry`]: voxel spacing and degree of anisotropy.
//! * [`tensor`]: dense tensors, 3D convolution and reverse-mode gradients.
//! * [`spad_conv`]: kernel/stride adaptation of isotropic base convolutions.
//! * [`rope`]: additive 3D rotary position embedding and its angle analysis.
//! * [`tokenizer`]: soft-token visual tokenizer with dual prior regularization.
//! * [`mim`]: masked token modeling with a spacing-adaptive ViT.
//! * [`datapipe`]: volume I/O, preprocessing, cropping and DA-bucketed batching.
//! * [`metrics`]: Dice, average symmetric surface distance and Hausdorff distance.

pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mim;
pub mod optim;
pub mod rope;
pub mod spad_conv;
pub mod tensor;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{degree_of_anisotropy, AnisotropyDegree, Direction, Spacing};
pub use tensor::{Graph, Real, Tensor, Var};

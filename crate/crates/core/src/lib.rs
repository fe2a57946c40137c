//! Dual-encoder convolutional network for joint skin-lesion segmentation and
//! classification, built on a small reverse-mode autograd core.

pub mod annotate;
pub mod autograd;
pub mod cascade;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;

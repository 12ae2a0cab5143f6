//! Fisher-information-guided block-wise post-training quantization of
//! small vision transformers.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide
//! dense `f64` arithmetic with reverse-mode gradients, [`nn`] the
//! transformer block, [`quant`] the quantizers, [`fim`] the curvature
//! estimators and their exact oracle, [`recon`] the block reconstruction
//! loop, [`zoo`] toy models and data, and [`experiment`] the sweep runner
//! behind the `fisherq` binary.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod experiment;
pub mod fim;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod quant;
pub mod recon;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Residual attention UNet for multispectral patch segmentation.
//!
//! The crate is self-contained: [`tensor`] provides the numeric kernels and
//! a reverse-mode tape, [`nn`] and [`attention`] the trainable layers,
//! [`model`] the assembled network, and [`loss`], [`metrics`], [`data`] and
//! [`train`] the surrounding training pipeline.

pub mod attention;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{ModelConfig, ResAttUNet};
pub use tensor::{Tape, Tensor, Var};

//! Trainable layers, initialization and the parameter registry.

pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod store;

pub use init::{he_init, init_rng};
pub use layers::{Builder, Conv, ConvBlock, Linear};
pub use store::{ParamId, Parameter, ParameterStore};

/// LeakyReLU negative slope used when none is configured.
pub const DEFAULT_SLOPE: f64 = 0.01;

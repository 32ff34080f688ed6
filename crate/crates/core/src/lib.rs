//! Segmentation engine built around a dual attention-gated residual U-Net,
//! with its own tensor/autodiff backend, preprocessing pipeline, Dice
//! objective, and training loop.

pub mod ablate;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Mode, Tensor};

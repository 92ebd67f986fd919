//! Semi-supervised, similarity-regularized 3D convolutional β-VAE.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

//! Generative adversarial classifier (GAC) for character image super-resolution.
//!
//! A generator upsamples low-resolution character images, a discriminator
//! scores realism, and a classifier keeps reconstructions recognizable. All
//! three are trained jointly on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

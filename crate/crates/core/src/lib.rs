//! Dual-branch implicit/explicit language guidance for a diffusion-style
//! perception backbone, built on a small reverse-mode autodiff engine.

pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod eval;
pub mod heads;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};

//! Conditional diffusion over human-object interaction sequences with a
//! contact-anchored correction step in the sampling loop.

pub(crate) mod binary;
pub mod body;
pub mod config;
pub mod corrector;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod frames;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod registry;
pub mod rotation;
pub mod shape;
pub mod training;
pub mod types;

pub use error::{Error, Result};

//! Litho-aware data augmentation.
//!
//! A threshold lithography model labels masks; a small dual-path surrogate
//! network learns to predict those labels; a style-based generator proposes new
//! masks whose latent inputs are pushed by gradient ascent towards inputs the
//! surrogate is expected to get wrong.

pub mod active;
pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod doinn;
pub mod error;
pub mod generator;
pub mod image;
pub mod litho;
pub mod metrics;
mod nn;
pub mod pattern;
pub mod rng;
pub mod sampler;

pub use error::{LadaError, Result};

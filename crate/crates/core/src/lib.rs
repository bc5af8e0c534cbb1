//! Cross-domain regression of renderer parameters from images.
//!
//! A procedural avatar renderer stands in for a game engine. A neural
//! imitator makes it differentiable; a shared encoder, two-level vector
//! quantizer and regressor map images from both the rendered domain and a
//! shifted "photo" domain to bounded parameter vectors.

pub mod aux_extractors;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod imitator;
pub mod objectives;
mod nn;
pub mod perception;
pub mod procgen;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

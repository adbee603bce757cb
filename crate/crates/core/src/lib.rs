//! Style-aware talking-face synthesis: a linear face model, motion style
//! codes, audio features, latent style fusion from audio to motion, and
//! neural-texture rendering.

pub mod audio;
pub mod container;
pub mod error;
pub mod data;
pub mod face_model;
pub mod lsf;
pub mod nn;
pub mod render;
pub mod style;

pub use error::{Error, Result};

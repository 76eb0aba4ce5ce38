//! Frequency-guided reconstruction-error detection of diffusion-generated images.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fmre;
pub mod losses;
pub mod parallel;
pub mod reconstructor;
pub mod spectrum;
pub mod synth;
pub mod tensorops;
pub mod viz;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

//! Audio texture synthesis and style transfer by matching Gram-matrix
//! statistics of random-weight convolutional features on spectrograms.

pub mod dsp;
pub mod losses;
pub mod network;
pub mod optim;
pub mod synth;
mod error;

pub use error::{Error, Result};

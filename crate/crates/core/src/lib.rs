//! Core of the anyecg chat model: ECG records and preprocessing, the
//! ViT-style ECG encoder, and the fusion of encoder tokens into a decoder LM.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod records;
pub mod synth;

pub use error::{Error, Result};

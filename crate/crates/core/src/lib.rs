//! Audio-visual deepfake detection that ignores phoneme-viseme pairs a
//! generator is likely to have calibrated and compares the remaining
//! segments across modalities.

pub mod autograd;
pub mod clip;
pub mod common_space;
pub mod docsrepro;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod pvam;
pub mod screening;
pub mod synthcorpus;
pub mod tokenizer;

pub use error::{Error, Result};

//! Mask-based anomaly segmentation toolkit: a toy mask-transformer with
//! masked attention, contrastive outlier training, refinement-mask
//! inference, and a pixel-/component-level evaluation harness.

pub mod attention;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod mten;
pub mod pgm;
pub mod refinement;
pub mod scoring;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

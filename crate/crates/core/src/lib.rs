//! Joint listwise reranking and ranked-list truncation.
//!
//! A shared encoder reads a candidate list once; a step-wise decoder then
//! picks the next document and decides whether to stop after it.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod letor;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use params::{Checkpoint, ModelParams};
pub use types::{DecodeMode, DecodeTrace, FeatureDoc, GammaMap, ModelConfig, QueryList};

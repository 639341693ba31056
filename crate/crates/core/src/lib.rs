//! Few-shot ejection-fraction regression from echo-like videos.
//!
//! Frames are encoded by a small convolutional network (optionally with
//! multi-scale tile fusion), pooled over time by attention, classified
//! against per-bin prototypes and decoded into a continuous estimate.

pub mod data;
pub mod diffcore;
pub mod echozoom;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod mfl;
pub mod ordinal;
pub mod params;

pub use error::{Error, Result};

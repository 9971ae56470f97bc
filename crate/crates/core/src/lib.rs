//! Weakly supervised instrument segmentation from image-level presence labels.
//!
//! The pipeline trains a multi-class-token transformer for multi-label
//! classification, regularised by two temporal losses over frame pairs
//! (prototype-based temporal equivariance and class-aware temporal semantic
//! continuity), then turns class activation maps into semantic seeds and
//! connectivity-based instance pseudo masks, and scores them.

pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod evaluate;
pub mod losses;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod plots;
pub mod pseudomask;
pub mod sampler;
pub mod synthvid;
pub mod trainer;

pub use error::{Error, Result};

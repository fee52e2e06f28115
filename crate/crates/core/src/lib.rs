//! Multimodal biosignal gesture classification with attention-edge masking.

pub mod dataset;
pub mod error;
pub mod masking;
pub mod model;
pub mod signal;
pub mod stats;

pub use error::{Error, Result};
